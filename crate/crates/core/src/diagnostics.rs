//! Distribution statistics, histograms and rotate-vs-direct quantization
//! error comparisons.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hadamard::{hadamard_forward, HadamardPlan};
use crate::layers::Precision;
use crate::quant::{quantize_act_int4, quantize_act_int8, QuantConfig};
use crate::tensor::Tensor;
use crate::toytrain::{Batch, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DistStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub absmax: f64,
    pub absmean: f64,
    pub excess_kurtosis: f64,
    /// Fraction of entries with `|x - mean| > 4 std`.
    pub outlier_ratio_4: f64,
    /// Fraction of entries with `|x - mean| > 6 std`.
    pub outlier_ratio_6: f64,
}

impl DistStats {
    pub fn outlier_ratio(&self, k: u32) -> Option<f64> {
        match k {
            4 => Some(self.outlier_ratio_4),
            6 => Some(self.outlier_ratio_6),
            _ => None,
        }
    }
}

/// Population moments over every element of `x`.
pub fn dist_stats(x: &Tensor) -> Result<DistStats> {
    stats_of(x.data())
}

fn stats_of(x: &[f32]) -> Result<DistStats> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m4, mut absmax, mut abssum) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &v in x {
        let d = v as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
        absmax = absmax.max((v as f64).abs());
        abssum += (v as f64).abs();
    }
    m2 /= n;
    m4 /= n;
    if x.len() < 2 || m2 <= f64::MIN_POSITIVE {
        return Err(Error::ZeroVariance);
    }
    let std = m2.sqrt();
    let ratio = |k: f64| {
        x.iter()
            .filter(|&&v| (v as f64 - mean).abs() > k * std)
            .count() as f64
            / n
    };
    Ok(DistStats {
        count: x.len(),
        mean,
        std,
        absmax,
        absmean: abssum / n,
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        outlier_ratio_4: ratio(4.0),
        outlier_ratio_6: ratio(6.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotateCompare {
    pub bits: u32,
    /// Per-token mean squared quantize-dequantize error of `x`.
    pub mse_direct: Vec<f64>,
    /// Same for `H x`, measured in the rotated domain.
    pub mse_rotated: Vec<f64>,
    pub mean_mse_direct: f64,
    pub mean_mse_rotated: f64,
    /// `mean_mse_rotated / mean_mse_direct`; absent when both are zero.
    pub ratio: Option<f64>,
    /// Absent when the domain has zero variance.
    pub stats_direct: Option<DistStats>,
    pub stats_rotated: Option<DistStats>,
}

fn quant_dequant(x: &Tensor, bits: u32) -> Result<Tensor> {
    let cfg = QuantConfig::default();
    match bits {
        8 => Ok(quantize_act_int8(x, &cfg).dequantize()),
        4 => Ok(quantize_act_int4(x, &cfg).dequantize()),
        b => Err(Error::BadBitWidth(b)),
    }
}

fn row_mse(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let w = a.last_dim();
    a.data()
        .chunks_exact(w)
        .zip(b.data().chunks_exact(w))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&p, &q)| ((p - q) as f64).powi(2))
                .sum::<f64>()
                / w as f64
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-token activation quantization error with and without the Hadamard
/// transform. `bits` selects INT8 absmax (8) or INT4 absmean (4).
pub fn rotate_compare(x: &Tensor, bits: u32) -> Result<RotateCompare> {
    let plan = HadamardPlan::new(x.last_dim())?;
    if bits != 4 && bits != 8 {
        return Err(Error::BadBitWidth(bits));
    }
    let rotated = hadamard_forward(x, &plan)?;
    let mse_direct = row_mse(x, &quant_dequant(x, bits)?);
    let mse_rotated = row_mse(&rotated, &quant_dequant(&rotated, bits)?);
    let (md, mr) = (mean(&mse_direct), mean(&mse_rotated));
    let optional = |r: Result<DistStats>| match r {
        Ok(s) => Ok(Some(s)),
        Err(Error::ZeroVariance) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(RotateCompare {
        bits,
        ratio: if md == 0.0 && mr == 0.0 {
            None
        } else {
            Some(mr / md)
        },
        mean_mse_direct: md,
        mean_mse_rotated: mr,
        mse_direct,
        mse_rotated,
        stats_direct: optional(dist_stats(x))?,
        stats_rotated: optional(dist_stats(&rotated))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub min: f32,
    pub max: f32,
    pub counts: Vec<u64>,
    /// Entries below `min`.
    pub underflow: u64,
    /// Entries above `max`.
    pub overflow: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn bin_edges(&self, i: usize) -> (f32, f32) {
        let w = (self.max - self.min) / self.counts.len() as f32;
        (self.min + w * i as f32, self.min + w * (i + 1) as f32)
    }

    /// `kind,lo,hi,count` rows, with underflow and overflow first and last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,lo,hi,count\n");
        out.push_str(&format!("underflow,-inf,{},{}\n", self.min, self.underflow));
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_edges(i);
            out.push_str(&format!("bin,{lo},{hi},{c}\n"));
        }
        out.push_str(&format!("overflow,{},inf,{}\n", self.max, self.overflow));
        out
    }
}

/// Uniform bins over `[min, max]`; the top edge belongs to the last bin.
pub fn histogram(x: &Tensor, bins: usize, min: f32, max: f32) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::BadRange("at least one bin is required".into()));
    }
    if !(min.is_finite() && max.is_finite() && min < max) {
        return Err(Error::BadRange(format!(
            "range [{min}, {max}] is empty or not finite"
        )));
    }
    let mut h = Histogram {
        min,
        max,
        counts: vec![0; bins],
        underflow: 0,
        overflow: 0,
    };
    let scale = bins as f64 / (max as f64 - min as f64);
    for &v in x.data() {
        if v < min {
            h.underflow += 1;
        } else if v > max {
            h.overflow += 1;
        } else {
            let i = (((v as f64 - min as f64) * scale) as usize).min(bins - 1);
            h.counts[i] += 1;
        }
    }
    Ok(h)
}

/// Projection inputs that can be captured from a block.
pub const CAPTURE_TAGS: [&str; 4] = ["W_qkv", "W_o", "W_up,gate", "W_down"];

#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub tag: String,
    /// Pre-quantization input after the projection's normalization.
    pub input: Tensor,
    /// `H · input` for the two H-BitLinear projections.
    pub rotated: Option<Tensor>,
}

/// Runs `batch` through `model` and returns the inputs of the tagged
/// projections of block `layer`. For H-BitLinear projections the rotated
/// input is always reported, even if the model itself does not rotate.
pub fn capture_activations(
    model: &mut ToyModel,
    batch: &Batch,
    layer: usize,
    tags: &[&str],
    precision: Precision,
) -> Result<Vec<Capture>> {
    if let Some(bad) = tags.iter().find(|t| !CAPTURE_TAGS.contains(t)) {
        return Err(Error::UnknownTag(bad.to_string()));
    }
    if layer >= model.layers().len() {
        return Err(Error::BadRange(format!(
            "layer {layer} out of range for a {}-layer model",
            model.layers().len()
        )));
    }
    let rotates = model.config().rotation.rotates_activations();
    model.forward(&batch.tokens, batch.seq_len, precision, None)?;
    let c = model.layers()[layer]
        .captures()
        .ok_or(Error::MissingContext)?;
    let hbl = |normed: &Tensor, rotated: &Tensor| -> Result<(Tensor, Option<Tensor>)> {
        let r = if rotates {
            rotated.clone()
        } else {
            hadamard_forward(normed, &HadamardPlan::new(normed.last_dim())?)?
        };
        Ok((normed.clone(), Some(r)))
    };
    tags.iter()
        .map(|&tag| {
            let (input, rotated) = match tag {
                "W_qkv" => (c.qkv_input.clone(), None),
                "W_up,gate" => (c.up_gate_input.clone(), None),
                "W_o" => hbl(c.o_normed, c.o_rotated)?,
                _ => hbl(c.down_normed, c.down_rotated)?,
            };
            Ok(Capture {
                tag: tag.to_string(),
                input,
                rotated,
            })
        })
        .collect()
}
