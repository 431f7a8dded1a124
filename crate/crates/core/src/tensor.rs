//! Dense row-major `f32` tensors and the `.bnt` binary container.
//!
//! Layout of a `.bnt` file, all multi-byte fields little-endian:
//!
//! | offset      | size        | field                                   |
//! |-------------|-------------|-----------------------------------------|
//! | 0           | 4           | magic `b"BNT2"`                         |
//! | 4           | 1           | dtype code (see [`DType`])              |
//! | 5           | 1           | `ndim`, at most 4                       |
//! | 6           | 4 * ndim    | shape entries, `u32`                    |
//! | 6 + 4*ndim  | 8           | payload length in bytes, `u64`          |
//! | 14 + 4*ndim | payload     | element data                            |

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels;

pub const MAGIC: [u8; 4] = *b"BNT2";
pub const MAX_NDIM: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

impl Tensor {
    /// Builds a tensor from row-major values, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_values(shape: &[usize], values: &[f32]) -> Result<Self> {
        Self::from_vec(shape, values.to_vec())
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "shape {shape:?} must have positive dimensions"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} elements, got {}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for results of operations whose inputs were
    /// already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self
            .shape
            .last()
            .expect("tensor has at least one dimension")
    }

    /// Number of rows when the tensor is viewed as `[prod(leading), last]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn get(&self, index: &[usize]) -> Option<f32> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    /// Flattens all leading dimensions: `[a, b, .., n]` becomes `[a*b*.., n]`.
    pub fn as_matrix(&self) -> (usize, usize) {
        (self.rows(), self.last_dim())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// True iff every elementwise absolute difference is at most `atol`.
    pub fn allclose(&self, other: &Tensor, atol: f32) -> Result<bool> {
        Ok(self.max_abs_diff(other)? <= atol)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        BntArray::from(self.clone()).save(path)
    }

    /// Loads any `.bnt` file, decoding integer and packed payloads to their
    /// real values.
    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        BntArray::load(path)?.to_tensor()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Real32 = 0,
    Int8 = 1,
    PackedTrit = 2,
    PackedInt4 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::Real32),
            1 => Some(DType::Int8),
            2 => Some(DType::PackedTrit),
            3 => Some(DType::PackedInt4),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Real32 => "real32",
            DType::Int8 => "int8",
            DType::PackedTrit => "packed-trit",
            DType::PackedInt4 => "packed-int4",
        }
    }

    /// Payload bytes needed for `n` logical elements.
    pub fn payload_len(self, n: usize) -> usize {
        match self {
            DType::Real32 => 4 * n,
            DType::Int8 => n,
            DType::PackedTrit => n.div_ceil(4),
            DType::PackedInt4 => n.div_ceil(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Real32(Vec<f32>),
    Int8(Vec<i8>),
    /// 2-bit codes `value + 1`, four per byte, lowest trit in bits 0..2.
    PackedTrit(Vec<u8>),
    /// Two's-complement nibbles, low nibble first.
    PackedInt4(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::Real32(_) => DType::Real32,
            Payload::Int8(_) => DType::Int8,
            Payload::PackedTrit(_) => DType::PackedTrit,
            Payload::PackedInt4(_) => DType::PackedInt4,
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Payload::Real32(v) => 4 * v.len(),
            Payload::Int8(v) => v.len(),
            Payload::PackedTrit(b) | Payload::PackedInt4(b) => b.len(),
        }
    }
}

/// One array as stored in a `.bnt` file, before any decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct BntArray {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl From<Tensor> for BntArray {
    fn from(t: Tensor) -> Self {
        BntArray {
            shape: t.shape,
            payload: Payload::Real32(t.data),
        }
    }
}

impl BntArray {
    pub fn dtype(&self) -> DType {
        self.payload.dtype()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.shape.is_empty() || self.shape.len() > MAX_NDIM {
            return Err(Error::BadHeader(format!(
                "ndim {} outside 1..={MAX_NDIM}",
                self.shape.len()
            )));
        }
        let expected = self.dtype().payload_len(self.numel());
        if self.payload.byte_len() != expected {
            return Err(Error::shape(format!(
                "{} payload of {} bytes for shape {:?}, expected {expected}",
                self.dtype().name(),
                self.payload.byte_len(),
                self.shape
            )));
        }
        let mut out = Vec::with_capacity(14 + 4 * self.shape.len() + expected);
        out.extend_from_slice(&MAGIC);
        out.push(self.dtype() as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::BadHeader(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(expected as u64).to_le_bytes());
        match &self.payload {
            Payload::Real32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Int8(v) => out.extend(v.iter().map(|&x| x as u8)),
            Payload::PackedTrit(b) | Payload::PackedInt4(b) => out.extend_from_slice(b),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |msg: &str| Error::BadHeader(msg.to_string());
        if bytes.len() < 4 {
            return Err(header("file shorter than magic"));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < 6 {
            return Err(header("file ends inside header"));
        }
        let dtype = DType::from_code(bytes[4])
            .ok_or_else(|| Error::BadHeader(format!("unknown dtype code {}", bytes[4])))?;
        let ndim = bytes[5] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::BadHeader(format!(
                "ndim {ndim} outside 1..={MAX_NDIM}"
            )));
        }
        let header_len = 6 + 4 * ndim + 8;
        if bytes.len() < header_len {
            return Err(header("file ends inside header"));
        }
        let shape: Vec<usize> = bytes[6..6 + 4 * ndim]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::BadHeader(format!("zero dimension in {shape:?}")));
        }
        let declared = u64::from_le_bytes(bytes[6 + 4 * ndim..header_len].try_into().unwrap());
        let available = (bytes.len() - header_len) as u64;
        if available < declared {
            return Err(Error::TruncatedPayload {
                declared,
                available,
            });
        }
        if available > declared {
            return Err(Error::BadHeader(format!(
                "{} trailing bytes after payload",
                available - declared
            )));
        }
        let numel: usize = shape.iter().product();
        if declared != dtype.payload_len(numel) as u64 {
            return Err(Error::BadHeader(format!(
                "payload length {declared} inconsistent with {} shape {shape:?}",
                dtype.name()
            )));
        }
        let body = &bytes[header_len..];
        let payload = match dtype {
            DType::Real32 => Payload::Real32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::Int8 => Payload::Int8(body.iter().map(|&b| b as i8).collect()),
            DType::PackedTrit => Payload::PackedTrit(body.to_vec()),
            DType::PackedInt4 => Payload::PackedInt4(body.to_vec()),
        };
        Ok(BntArray { shape, payload })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Decodes the payload to real values. Packed trits decode to {-1, 0, 1}
    /// and nibbles to their signed codes; no scale is applied.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let n = self.numel();
        let values = match &self.payload {
            Payload::Real32(v) => v.clone(),
            Payload::Int8(v) => v.iter().map(|&x| x as f32).collect(),
            Payload::PackedTrit(b) => kernels::decode_trits(b, n)?
                .into_iter()
                .map(|t| t as f32)
                .collect(),
            Payload::PackedInt4(b) => kernels::decode_nibbles(b, n)
                .into_iter()
                .map(|c| c as f32)
                .collect(),
        };
        Tensor::from_vec(&self.shape, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_values(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[1, 0]), Some(3.0));
        assert_eq!(t.get(&[2, 0]), None);
    }

    #[test]
    fn zero_tensor() {
        let t = Tensor::from_values(&[4], &[0.0; 4]).unwrap();
        assert_eq!(t.sum(), 0.0);
    }

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(matches!(
            Tensor::from_values(&[2], &[1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(
            Tensor::from_values(&[3], &[1.0, 2.0]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            Tensor::from_values(&[0], &[]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn allclose_tolerances() {
        let a = Tensor::from_values(&[2], &[1.0, 2.0]).unwrap();
        assert!(a.allclose(&a, 0.0).unwrap());
        let one = Tensor::from_values(&[1], &[1.0]).unwrap();
        let near = Tensor::from_values(&[1], &[1.0001]).unwrap();
        let far = Tensor::from_values(&[1], &[1.01]).unwrap();
        assert!(one.allclose(&near, 1e-3).unwrap());
        assert!(!one.allclose(&far, 1e-3).unwrap());
        assert!(a.allclose(&one, 1.0).is_err());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = Tensor::from_values(&[2], &[1.5, -2.5]).unwrap();
        let mut bytes = BntArray::from(t).to_bytes().unwrap();
        let good = bytes.clone();

        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            BntArray::from_bytes(&bytes),
            Err(Error::BadMagic(_))
        ));

        // header claims 8 payload bytes; keep only 4
        let cut = &good[..good.len() - 4];
        assert!(matches!(
            BntArray::from_bytes(cut),
            Err(Error::TruncatedPayload {
                declared: 8,
                available: 4
            })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let t = Tensor::from_values(&[1], &[1.0]).unwrap();
        let mut bytes = BntArray::from(t).to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            BntArray::from_bytes(&bytes),
            Err(Error::BadHeader(_))
        ));
    }
}
