//! Bit-packed operand storage and the exact integer GEMM.
//!
//! Trits are stored as 2-bit codes `value + 1` (so code 3 never occurs), four
//! per byte with the first element in bits 0..2. INT4 codes are two's
//! complement nibbles, two per byte, low nibble first. Both layouts are
//! row-major over the flattened matrix, so a row boundary may fall inside a
//! byte.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{ActMode, QuantizedActivation};
use crate::tensor::Tensor;

/// Largest inner dimension for which `i32` accumulation of INT8 × trit
/// products cannot overflow: `2^23 · 128 = 2^30`.
pub const MAX_INNER_DIM: usize = 1 << 23;

/// Output elements per rayon task.
const PAR_MIN_OUTPUTS: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedTritMatrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

impl PackedTritMatrix {
    /// Packs values already known to be in {-1, 0, 1}.
    pub(crate) fn from_trits(rows: usize, cols: usize, trits: &[i8]) -> Self {
        debug_assert_eq!(trits.len(), rows * cols);
        let mut bytes = vec![0u8; trits.len().div_ceil(4)];
        for (i, &t) in trits.iter().enumerate() {
            debug_assert!((-1..=1).contains(&t));
            bytes[i / 4] |= ((t + 1) as u8) << (2 * (i % 4));
        }
        PackedTritMatrix { rows, cols, bytes }
    }

    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>) -> Result<Self> {
        let n = rows * cols;
        if bytes.len() != n.div_ceil(4) {
            return Err(Error::shape(format!(
                "{} bytes cannot hold {rows}x{cols} trits",
                bytes.len()
            )));
        }
        decode_trits(&bytes, n)?;
        Ok(PackedTritMatrix { rows, cols, bytes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: usize) -> i8 {
        ((self.bytes[i / 4] >> (2 * (i % 4))) & 0b11) as i8 - 1
    }

    pub fn to_trits(&self) -> Vec<i8> {
        (0..self.rows * self.cols).map(|i| self.get(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInt4Matrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

impl PackedInt4Matrix {
    /// Packs codes already known to be in [-8, 7].
    pub(crate) fn from_codes(rows: usize, cols: usize, codes: &[i8]) -> Self {
        debug_assert_eq!(codes.len(), rows * cols);
        let mut bytes = vec![0u8; codes.len().div_ceil(2)];
        for (i, &c) in codes.iter().enumerate() {
            debug_assert!((-8..=7).contains(&c));
            bytes[i / 2] |= ((c as u8) & 0x0f) << (4 * (i % 2));
        }
        PackedInt4Matrix { rows, cols, bytes }
    }

    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != (rows * cols).div_ceil(2) {
            return Err(Error::shape(format!(
                "{} bytes cannot hold {rows}x{cols} nibbles",
                bytes.len()
            )));
        }
        Ok(PackedInt4Matrix { rows, cols, bytes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    #[inline]
    pub fn get(&self, i: usize) -> i8 {
        nibble(self.bytes[i / 2], i % 2)
    }

    /// Decodes elements `start .. start + out.len()` of the flattened matrix.
    pub fn unpack_range_into(&self, start: usize, out: &mut [i8]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.get(start + j);
        }
    }

    pub fn to_codes(&self) -> Vec<i8> {
        decode_nibbles(&self.bytes, self.rows * self.cols)
    }
}

#[inline]
fn nibble(byte: u8, high: usize) -> i8 {
    // shift the nibble into the top of an i8, then sign-extend back down
    (((byte >> (4 * high)) << 4) as i8) >> 4
}

pub(crate) fn decode_trits(bytes: &[u8], n: usize) -> Result<Vec<i8>> {
    if bytes.len() < n.div_ceil(4) {
        return Err(Error::shape(format!("{} bytes for {n} trits", bytes.len())));
    }
    (0..n)
        .map(|i| {
            let code = (bytes[i / 4] >> (2 * (i % 4))) & 0b11;
            if code == 3 {
                Err(Error::NonTernaryValue {
                    index: i,
                    value: 2.0,
                })
            } else {
                Ok(code as i8 - 1)
            }
        })
        .collect()
}

pub(crate) fn decode_nibbles(bytes: &[u8], n: usize) -> Vec<i8> {
    (0..n).map(|i| nibble(bytes[i / 2], i % 2)).collect()
}

/// Packs a tensor of {-1, 0, 1} values; leading dimensions become rows.
pub fn pack_trits(values: &Tensor) -> Result<PackedTritMatrix> {
    let (rows, cols) = values.as_matrix();
    let trits = values
        .data()
        .iter()
        .enumerate()
        .map(|(index, &value)| match value {
            v if v == 1.0 => Ok(1),
            v if v == 0.0 => Ok(0),
            v if v == -1.0 => Ok(-1),
            _ => Err(Error::NonTernaryValue { index, value }),
        })
        .collect::<Result<Vec<i8>>>()?;
    Ok(PackedTritMatrix::from_trits(rows, cols, &trits))
}

pub fn unpack_trits(packed: &PackedTritMatrix) -> Tensor {
    let data = packed.to_trits().into_iter().map(f32::from).collect();
    Tensor::from_parts(vec![packed.rows, packed.cols], data)
}

/// Packs integer codes in [-8, 7]; anything else (including non-integers) is
/// `CodeOutOfRange`.
pub fn pack_int4(values: &Tensor) -> Result<PackedInt4Matrix> {
    let (rows, cols) = values.as_matrix();
    let codes = values
        .data()
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if v.fract() == 0.0 && (-8.0..=7.0).contains(&v) {
                Ok(v as i8)
            } else {
                Err(Error::CodeOutOfRange {
                    index,
                    code: v.round() as i32,
                })
            }
        })
        .collect::<Result<Vec<i8>>>()?;
    Ok(PackedInt4Matrix::from_codes(rows, cols, &codes))
}

pub fn unpack_int4(packed: &PackedInt4Matrix) -> Tensor {
    let data = packed.to_codes().into_iter().map(f32::from).collect();
    Tensor::from_parts(vec![packed.rows, packed.cols], data)
}

#[inline]
fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| i32::from(x) * i32::from(y))
        .sum()
}

/// `Y[t, o] = α · step_t · Σ_k trit[o, k] · code[t, k]`.
///
/// `weights` is `[out, k]`, `acts` is `[tokens, k]` in INT8 or INT4 mode;
/// the result is `[tokens, out]`. Products accumulate exactly in `i32`.
pub fn gemm_ternary_int(
    weights: &PackedTritMatrix,
    acts: &QuantizedActivation,
    alpha: f32,
) -> Result<Tensor> {
    let (out_dim, k) = (weights.rows, weights.cols);
    if acts.width != k {
        return Err(Error::shape(format!(
            "weights are [{out_dim}, {k}] but activations have width {}",
            acts.width
        )));
    }
    if !matches!(acts.mode, ActMode::Int8 | ActMode::Int4) {
        return Err(Error::shape(
            "integer GEMM takes INT8 or INT4 activations".to_string(),
        ));
    }
    if k > MAX_INNER_DIM {
        return Err(Error::AccumulatorOverflow {
            k,
            limit: MAX_INNER_DIM,
        });
    }
    let trits = weights.to_trits();
    let tokens = acts.n_tokens;
    let mut out = vec![0.0f32; tokens * out_dim];

    let fill_token = |t: usize, y: &mut [f32], codes: &mut [i8]| {
        acts.row_codes_into(t, codes);
        let scale = alpha * acts.step(t);
        for (o, yo) in y.iter_mut().enumerate() {
            let acc = dot_i8(&trits[o * k..(o + 1) * k], codes);
            *yo = scale * acc as f32;
        }
    };

    if tokens * out_dim >= PAR_MIN_OUTPUTS && tokens > 1 {
        out.par_chunks_mut(out_dim)
            .enumerate()
            .for_each_init(|| vec![0i8; k], |codes, (t, y)| fill_token(t, y, codes));
    } else {
        let mut codes = vec![0i8; k];
        for (t, y) in out.chunks_mut(out_dim).enumerate() {
            fill_token(t, y, &mut codes);
        }
    }
    Ok(Tensor::from_parts(vec![tokens, out_dim], out))
}

/// Naive triple-loop `Y = X · Wᵀ` with `W: [out, k]`, `X: [tokens, k]`,
/// accumulated in `f64`.
pub fn gemm_reference(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (out_dim, k) = w.as_matrix();
    let (tokens, kx) = x.as_matrix();
    if k != kx {
        return Err(Error::shape(format!(
            "inner dimensions differ: weights {k}, activations {kx}"
        )));
    }
    let mut y = vec![0.0f32; tokens * out_dim];
    for t in 0..tokens {
        for o in 0..out_dim {
            let mut acc = 0.0f64;
            for i in 0..k {
                acc += w.data()[o * k + i] as f64 * x.data()[t * k + i] as f64;
            }
            y[t * out_dim + o] = acc as f32;
        }
    }
    Ok(Tensor::from_parts(vec![tokens, out_dim], y))
}

/// Memory traffic of one `[m, k] × [n, k]ᵀ` ternary GEMM, in bytes per output
/// element.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Traffic {
    pub weight_bytes: f64,
    pub activation_bytes: f64,
    pub output_bytes: f64,
}

impl Traffic {
    pub fn new(m: usize, n: usize, k: usize, act_bits: u32) -> Self {
        let outputs = (m * n) as f64;
        Traffic {
            weight_bytes: (n * k).div_ceil(4) as f64 / outputs,
            activation_bytes: (m * k * act_bits as usize).div_ceil(8) as f64 / outputs,
            output_bytes: 4.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.weight_bytes + self.activation_bytes + self.output_bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_act_int8, QuantConfig};

    #[test]
    fn trit_pack_worked_examples() {
        let p = pack_trits(&Tensor::from_values(&[4], &[1.0, -1.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(p.bytes(), &[146]);
        let p = pack_trits(&Tensor::zeros(&[8])).unwrap();
        assert_eq!(p.bytes(), &[0x55, 0x55]);
    }

    #[test]
    fn trit_pack_rejects_other_values() {
        let t = Tensor::from_values(&[3], &[1.0, 0.5, 0.0]).unwrap();
        assert!(matches!(
            pack_trits(&t),
            Err(Error::NonTernaryValue { index: 1, .. })
        ));
    }

    #[test]
    fn decode_rejects_code_three() {
        assert!(decode_trits(&[0b11], 1).is_err());
        assert!(PackedTritMatrix::from_bytes(1, 1, vec![0b11]).is_err());
    }

    #[test]
    fn int4_pack_worked_examples() {
        let p = pack_int4(&Tensor::from_values(&[2], &[-4.0, 7.0]).unwrap()).unwrap();
        assert_eq!(p.bytes(), &[124]);
        let p = pack_int4(&Tensor::zeros(&[2])).unwrap();
        assert_eq!(p.bytes(), &[0]);
    }

    #[test]
    fn int4_pack_rejects_out_of_range() {
        for bad in [8.0, -9.0, 1.5] {
            let t = Tensor::from_values(&[2], &[0.0, bad]).unwrap();
            assert!(matches!(
                pack_int4(&t),
                Err(Error::CodeOutOfRange { index: 1, .. })
            ));
        }
    }

    #[test]
    fn packing_density() {
        let p = pack_trits(&Tensor::zeros(&[3, 5])).unwrap();
        assert_eq!(p.bytes().len(), 4);
        let p = pack_int4(&Tensor::zeros(&[3, 5])).unwrap();
        assert_eq!(p.bytes().len(), 8);
    }

    #[test]
    fn gemm_hand_dot_product() {
        let w = pack_trits(&Tensor::from_values(&[1, 3], &[1.0, -1.0, 0.0]).unwrap()).unwrap();
        // γ = 127 makes the INT8 step exactly 1
        let x = Tensor::from_values(&[1, 4], &[3.0, -2.0, 5.0, 127.0]).unwrap();
        let q = quantize_act_int8(&x, &QuantConfig::default());
        let w4 =
            pack_trits(&Tensor::from_values(&[1, 4], &[1.0, -1.0, 0.0, 0.0]).unwrap()).unwrap();
        let y = gemm_ternary_int(&w4, &q, 1.0).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert!(gemm_ternary_int(&w, &q, 1.0).is_err());
    }

    #[test]
    fn gemm_zero_weights_annihilate() {
        let w = pack_trits(&Tensor::zeros(&[3, 4])).unwrap();
        let x = Tensor::from_values(&[2, 4], &[1.0, -2.0, 3.0, 4.0, 0.5, 0.5, -7.0, 1.0]).unwrap();
        let q = quantize_act_int8(&x, &QuantConfig::default());
        let y = gemm_ternary_int(&w, &q, 0.7).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_small_cases() {
        let eye = Tensor::from_values(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_values(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(gemm_reference(&eye, &x).unwrap(), x);
        let a = Tensor::from_values(&[1, 1], &[2.0]).unwrap();
        let b = Tensor::from_values(&[1, 1], &[3.0]).unwrap();
        assert_eq!(gemm_reference(&a, &b).unwrap().data(), &[6.0]);
        assert!(gemm_reference(&eye, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn int4_moves_half_the_activation_bytes() {
        let a8 = Traffic::new(64, 64, 256, 8);
        let a4 = Traffic::new(64, 64, 256, 4);
        assert_eq!(a4.activation_bytes * 2.0, a8.activation_bytes);
        assert_eq!(a4.weight_bytes, a8.weight_bytes);
    }
}
