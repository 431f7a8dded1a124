//! Weight and activation quantizers.
//!
//! * ternary weights: per-tensor absmean scale `α`, values in {-1, 0, 1}
//! * INT8 activations: per-token absmax scale `γ`, codes in [-128, 127]
//! * INT4 activations: per-token absmean scale `β`, step `β/√7`, codes in [-8, 7]
//! * KV states: per-token absmax onto unsigned codes `[0, 2^b - 1]`, zero at the
//!   midpoint `2^(b-1)`
//!
//! Every scale appears in a denominator as `max(scale, ε)`, so an all-zero row
//! quantizes to zero codes with a zero scale. Rounding is half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{PackedInt4Matrix, PackedTritMatrix};
use crate::tensor::{BntArray, Payload, Tensor};

pub const DEFAULT_EPSILON: f32 = 1e-6;
pub const SQRT_7: f32 = 2.645_751_3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    epsilon: f32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl QuantConfig {
    pub fn new(epsilon: f32) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(QuantConfig { epsilon })
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    #[inline]
    fn guard(&self, scale: f32) -> f32 {
        scale.max(self.epsilon)
    }
}

/// `min(max(round(x), a), b)` with ties to even.
#[inline]
pub fn round_clip_scalar(x: f32, a: i32, b: i32) -> f32 {
    x.round_ties_even().clamp(a as f32, b as f32)
}

pub fn round_clip(x: &Tensor, a: i32, b: i32) -> Tensor {
    assert!(a < b, "round_clip needs a < b, got [{a}, {b}]");
    x.map(|v| round_clip_scalar(v, a, b))
}

/// Activation precision of a quantized linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActBits {
    #[serde(rename = "a8")]
    A8,
    #[serde(rename = "a4")]
    A4,
}

impl ActBits {
    pub fn bits(self) -> u32 {
        match self {
            ActBits::A8 => 8,
            ActBits::A4 => 4,
        }
    }

    pub fn quantize(self, x: &Tensor, cfg: &QuantConfig) -> QuantizedActivation {
        match self {
            ActBits::A8 => quantize_act_int8(x, cfg),
            ActBits::A4 => quantize_act_int4(x, cfg),
        }
    }
}

/// Ternary weight matrix `α · T` with `T ∈ {-1, 0, 1}^{rows × cols}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryWeight {
    pub packed: PackedTritMatrix,
    pub alpha: f32,
}

impl TernaryWeight {
    pub fn rows(&self) -> usize {
        self.packed.rows()
    }

    pub fn cols(&self) -> usize {
        self.packed.cols()
    }

    pub fn trits(&self) -> Vec<i8> {
        self.packed.to_trits()
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self
            .packed
            .to_trits()
            .into_iter()
            .map(|t| self.alpha * t as f32)
            .collect();
        Tensor::from_parts(vec![self.rows(), self.cols()], data)
    }

    /// Packed trits as a `.bnt` array; `α` is not included.
    pub fn to_bnt(&self) -> BntArray {
        BntArray {
            shape: vec![self.rows(), self.cols()],
            payload: Payload::PackedTrit(self.packed.bytes().to_vec()),
        }
    }
}

/// Per-tensor absmean ternary quantization of a weight matrix. Leading
/// dimensions are flattened into rows.
pub fn quantize_weight(w: &Tensor, cfg: &QuantConfig) -> Result<TernaryWeight> {
    if w.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let (rows, cols) = w.as_matrix();
    let abs_sum: f64 = w.data().iter().map(|v| v.abs() as f64).sum();
    let alpha = (abs_sum / w.len() as f64) as f32;
    let inv = 1.0 / cfg.guard(alpha);
    let trits: Vec<i8> = w
        .data()
        .iter()
        .map(|&v| round_clip_scalar(v * inv, -1, 1) as i8)
        .collect();
    Ok(TernaryWeight {
        packed: PackedTritMatrix::from_trits(rows, cols, &trits),
        alpha,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Int8,
    Int4,
    /// Unsigned absmax codes with the requested bit width. Rows flagged as
    /// [BOS] are stored at 8 bits; see [`QuantizedActivation::token_bits`].
    KvUnsigned(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActCodes {
    Int8(Vec<i8>),
    Int4(PackedInt4Matrix),
    Unsigned(Vec<u8>),
}

/// Integer codes plus one scale per token row.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivation {
    pub n_tokens: usize,
    pub width: usize,
    pub mode: ActMode,
    pub codes: ActCodes,
    /// `γ` (absmax) for INT8 and KV rows, `β` (absmean) for INT4 rows.
    pub scales: Vec<f32>,
    /// Bit width each row was actually quantized at.
    pub token_bits: Vec<u32>,
}

impl QuantizedActivation {
    /// Multiplier turning a code into a real value for row `t`.
    pub fn step(&self, t: usize) -> f32 {
        match self.mode {
            ActMode::Int8 => self.scales[t] / 127.0,
            ActMode::Int4 => self.scales[t] / SQRT_7,
            ActMode::KvUnsigned(_) => self.scales[t] / half_range(self.token_bits[t]),
        }
    }

    /// Signed code of element `i` of row `t`; KV codes are returned
    /// recentred on their midpoint.
    pub fn code(&self, t: usize, i: usize) -> i32 {
        let idx = t * self.width + i;
        match &self.codes {
            ActCodes::Int8(c) => c[idx] as i32,
            ActCodes::Int4(p) => p.get(idx) as i32,
            ActCodes::Unsigned(c) => c[idx] as i32 - (1 << (self.token_bits[t] - 1)),
        }
    }

    /// Writes the signed codes of row `t` into `out` (length `width`).
    pub fn row_codes_into(&self, t: usize, out: &mut [i8]) {
        let start = t * self.width;
        match &self.codes {
            ActCodes::Int8(c) => out.copy_from_slice(&c[start..start + self.width]),
            ActCodes::Int4(p) => p.unpack_range_into(start, out),
            ActCodes::Unsigned(_) => {
                for (i, o) in out.iter_mut().enumerate() {
                    // 8-bit KV codes recentred span [-128, 127]
                    *o = self.code(t, i) as i8;
                }
            }
        }
    }

    /// Raw stored codes as reals (unsigned codes are not recentred).
    pub fn raw_codes(&self) -> Tensor {
        let data = match &self.codes {
            ActCodes::Int8(c) => c.iter().map(|&v| v as f32).collect(),
            ActCodes::Int4(p) => p.to_codes().into_iter().map(|v| v as f32).collect(),
            ActCodes::Unsigned(c) => c.iter().map(|&v| v as f32).collect(),
        };
        Tensor::from_parts(vec![self.n_tokens, self.width], data)
    }

    /// Codes as a `.bnt` array: `int8` for INT8, `packed-int4` for INT4 and
    /// `real32` holding the raw unsigned codes for KV rows.
    pub fn to_bnt(&self) -> BntArray {
        let payload = match &self.codes {
            ActCodes::Int8(c) => Payload::Int8(c.clone()),
            ActCodes::Int4(p) => Payload::PackedInt4(p.bytes().to_vec()),
            ActCodes::Unsigned(_) => Payload::Real32(self.raw_codes().into_data()),
        };
        BntArray {
            shape: vec![self.n_tokens, self.width],
            payload,
        }
    }

    /// `[tokens, 2]` table of `(scale, bits)` per row.
    pub fn scale_table(&self) -> Tensor {
        let data = self
            .scales
            .iter()
            .zip(&self.token_bits)
            .flat_map(|(&s, &b)| [s, b as f32])
            .collect();
        Tensor::from_parts(vec![self.n_tokens, 2], data)
    }

    pub fn dequantize(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.n_tokens * self.width);
        let mut row = vec![0i8; self.width];
        for t in 0..self.n_tokens {
            let step = self.step(t);
            match &self.codes {
                ActCodes::Unsigned(_) => {
                    data.extend((0..self.width).map(|i| self.code(t, i) as f32 * step))
                }
                _ => {
                    self.row_codes_into(t, &mut row);
                    data.extend(row.iter().map(|&c| c as f32 * step));
                }
            }
        }
        Tensor::from_parts(vec![self.n_tokens, self.width], data)
    }
}

fn half_range(bits: u32) -> f32 {
    (1u32 << (bits - 1)) as f32
}

fn absmax(row: &[f32]) -> f32 {
    row.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

fn absmean(row: &[f32]) -> f32 {
    (row.iter().map(|v| v.abs() as f64).sum::<f64>() / row.len() as f64) as f32
}

/// Per-token absmax INT8: `codes = RoundClip(127/γ · x, -128, 127)`.
pub fn quantize_act_int8(x: &Tensor, cfg: &QuantConfig) -> QuantizedActivation {
    let (n_tokens, width) = x.as_matrix();
    let mut codes = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(n_tokens);
    for t in 0..n_tokens {
        let row = x.row(t);
        let gamma = absmax(row);
        let s = 127.0 / cfg.guard(gamma);
        codes.extend(
            row.iter()
                .map(|&v| round_clip_scalar(s * v, -128, 127) as i8),
        );
        scales.push(gamma);
    }
    QuantizedActivation {
        n_tokens,
        width,
        mode: ActMode::Int8,
        codes: ActCodes::Int8(codes),
        scales,
        token_bits: vec![8; n_tokens],
    }
}

/// Per-token absmean INT4: `codes = RoundClip(√7/β · x, -8, 7)`.
pub fn quantize_act_int4(x: &Tensor, cfg: &QuantConfig) -> QuantizedActivation {
    let (n_tokens, width) = x.as_matrix();
    let mut codes: Vec<i8> = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(n_tokens);
    for t in 0..n_tokens {
        let row = x.row(t);
        let beta = absmean(row);
        let s = SQRT_7 / cfg.guard(beta);
        codes.extend(row.iter().map(|&v| round_clip_scalar(s * v, -8, 7) as i8));
        scales.push(beta);
    }
    QuantizedActivation {
        n_tokens,
        width,
        mode: ActMode::Int4,
        codes: ActCodes::Int4(PackedInt4Matrix::from_codes(n_tokens, width, &codes)),
        scales,
        token_bits: vec![4; n_tokens],
    }
}

/// Unsigned absmax quantization for post-RoPE Q/K/V rows.
///
/// `code = RoundClip(x/γ · 2^(b-1) + 2^(b-1), 0, 2^b - 1)`. Rows with
/// `bos_mask[t] == true` use 8 bits whatever `bits` is. An empty mask means no
/// row is flagged.
pub fn quantize_kv_unsigned(
    x: &Tensor,
    bits: u32,
    bos_mask: &[bool],
    cfg: &QuantConfig,
) -> Result<QuantizedActivation> {
    if !matches!(bits, 3 | 4 | 8) {
        return Err(Error::BadBitWidth(bits));
    }
    let (n_tokens, width) = x.as_matrix();
    if !bos_mask.is_empty() && bos_mask.len() != n_tokens {
        return Err(Error::shape(format!(
            "bos mask has {} entries for {n_tokens} tokens",
            bos_mask.len()
        )));
    }
    let mut codes = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(n_tokens);
    let mut token_bits = Vec::with_capacity(n_tokens);
    for t in 0..n_tokens {
        let row_bits = if bos_mask.get(t).copied().unwrap_or(false) {
            8
        } else {
            bits
        };
        let half = half_range(row_bits);
        let max_code = ((1u32 << row_bits) - 1) as i32;
        let row = x.row(t);
        let gamma = absmax(row);
        let s = half / cfg.guard(gamma);
        codes.extend(
            row.iter()
                .map(|&v| round_clip_scalar(v * s + half, 0, max_code) as u8),
        );
        scales.push(gamma);
        token_bits.push(row_bits);
    }
    Ok(QuantizedActivation {
        n_tokens,
        width,
        mode: ActMode::KvUnsigned(bits),
        codes: ActCodes::Unsigned(codes),
        scales,
        token_bits,
    })
}

/// Straight-through estimator: every quantizer passes its upstream gradient
/// through unchanged.
pub fn ste_backward(upstream: &Tensor) -> Tensor {
    upstream.clone()
}
