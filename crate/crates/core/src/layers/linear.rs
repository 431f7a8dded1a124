use crate::error::{Error, Result};
use crate::hadamard::HadamardPlan;
use crate::kernels::gemm_ternary_int;
use crate::layers::rmsnorm::{rmsnorm_backward, rmsnorm_forward, DEFAULT_RMS_EPS};
use crate::layers::{Precision, Rotation};
use crate::linalg::{matmul_nn, matmul_nt, matmul_tn};
use crate::quant::{quantize_weight, QuantConfig};
use crate::tensor::Tensor;

/// Operands actually multiplied in the forward pass. Under the STE the
/// backward treats them as constants.
#[derive(Clone, Debug)]
struct MatmulSaved {
    x_used: Tensor,
    w_used: Tensor,
}

/// `y = x · Wᵀ`, either in full precision or through the packed ternary
/// kernel.
fn quantized_matmul(x: &Tensor, w: &Tensor, precision: Precision) -> Result<(Tensor, MatmulSaved)> {
    let (out_dim, k) = w.as_matrix();
    if x.last_dim() != k {
        return Err(Error::shape(format!(
            "input feature dim {} but weight is [{out_dim}, {k}]",
            x.last_dim()
        )));
    }
    let (tokens, _) = x.as_matrix();
    match precision.act_bits() {
        None => {
            let y = matmul_nt(x.data(), w.data(), tokens, k, out_dim);
            Ok((
                Tensor::from_parts(vec![tokens, out_dim], y),
                MatmulSaved {
                    x_used: x.clone(),
                    w_used: w.clone(),
                },
            ))
        }
        Some(bits) => {
            let cfg = QuantConfig::default();
            let tw = quantize_weight(w, &cfg)?;
            let qa = bits.quantize(x, &cfg);
            let y = gemm_ternary_int(&tw.packed, &qa, tw.alpha)?;
            Ok((
                y,
                MatmulSaved {
                    x_used: qa.dequantize(),
                    w_used: tw.dequantize(),
                },
            ))
        }
    }
}

/// Returns `(dx, dw)` for `y = x_used · w_usedᵀ`.
fn matmul_backward(dy: &Tensor, saved: &MatmulSaved) -> Result<(Tensor, Tensor)> {
    let (tokens, out_dim) = dy.as_matrix();
    let (w_out, k) = saved.w_used.as_matrix();
    if w_out != out_dim || saved.x_used.rows() != tokens {
        return Err(Error::shape(format!(
            "upstream {:?} does not match saved forward",
            dy.shape()
        )));
    }
    let dx = matmul_nn(dy.data(), saved.w_used.data(), tokens, out_dim, k);
    let dw = matmul_tn(dy.data(), saved.x_used.data(), tokens, out_dim, k);
    Ok((
        Tensor::from_parts(vec![tokens, k], dx),
        Tensor::from_parts(vec![out_dim, k], dw),
    ))
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
}

/// Ternary-weight linear layer without bias: `y = Q_w(W) · Q_act(x)`.
#[derive(Clone, Debug)]
pub struct BitLinear {
    /// Latent full-precision weight, `[out, in]`.
    pub weight: Tensor,
    saved: Option<MatmulSaved>,
}

impl BitLinear {
    pub fn new(weight: Tensor) -> Self {
        BitLinear {
            weight,
            saved: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.last_dim()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&mut self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        let (y, saved) = quantized_matmul(x, &self.weight, precision)?;
        self.saved = Some(saved);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<LinearGrads> {
        let saved = self.saved.take().ok_or(Error::MissingContext)?;
        let (dx, dweight) = matmul_backward(dy, &saved)?;
        Ok(LinearGrads { dx, dweight })
    }
}

#[derive(Clone, Debug)]
pub struct HBitLinearGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dgain: Tensor,
}

#[derive(Clone, Debug)]
struct HSaved {
    x: Tensor,
    matmul: MatmulSaved,
}

/// Linear layer with an online Hadamard rotation before activation
/// quantization: `y = Q_w(W) · Q_act(H · RMSNorm(x))`.
#[derive(Clone, Debug)]
pub struct HBitLinear {
    /// Latent full-precision weight, `[out, in]`.
    pub weight: Tensor,
    /// RMSNorm gain, `[in]`.
    pub gain: Tensor,
    pub rotation: Rotation,
    plan: HadamardPlan,
    saved: Option<HSaved>,
    last_inputs: Option<(Tensor, Tensor)>,
}

impl HBitLinear {
    pub fn new(weight: Tensor, gain: Tensor, rotation: Rotation) -> Result<Self> {
        let n = weight.last_dim();
        let plan = HadamardPlan::new(n)?;
        if gain.len() != n {
            return Err(Error::shape(format!(
                "gain has {} entries for {n} input features",
                gain.len()
            )));
        }
        Ok(HBitLinear {
            weight,
            gain,
            rotation,
            plan,
            saved: None,
            last_inputs: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.plan.len()
    }

    pub fn plan(&self) -> &HadamardPlan {
        &self.plan
    }

    /// Weight actually ternarized: `W` or, with weight rotation, `W H`.
    fn effective_weight(&self) -> Tensor {
        let mut w = self.weight.clone();
        if self.rotation == Rotation::WeightActivation {
            self.plan.apply_rows_in_place(w.data_mut());
        }
        w
    }

    pub fn forward(&mut self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        if x.last_dim() != self.plan.len() {
            return Err(Error::shape(format!(
                "input feature dim {} but layer expects {}",
                x.last_dim(),
                self.plan.len()
            )));
        }
        let normed = rmsnorm_forward(x, &self.gain, DEFAULT_RMS_EPS)?;
        let mut rotated = normed.clone();
        if self.rotation.rotates_activations() {
            self.plan.apply_rows_in_place(rotated.data_mut());
        }
        let (y, matmul) = quantized_matmul(&rotated, &self.effective_weight(), precision)?;
        self.saved = Some(HSaved {
            x: x.clone(),
            matmul,
        });
        self.last_inputs = Some((normed, rotated));
        Ok(y)
    }

    /// Pre-quantization inputs of the most recent forward:
    /// `(RMSNorm(x), H · RMSNorm(x))`. The second equals the first when the
    /// rotation is disabled.
    pub fn last_inputs(&self) -> Option<(&Tensor, &Tensor)> {
        self.last_inputs.as_ref().map(|(a, b)| (a, b))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<HBitLinearGrads> {
        let saved = self.saved.take().ok_or(Error::MissingContext)?;
        let (mut d_rotated, mut dweight) = matmul_backward(dy, &saved.matmul)?;
        if self.rotation == Rotation::WeightActivation {
            self.plan.apply_rows_in_place(dweight.data_mut());
        }
        if self.rotation.rotates_activations() {
            self.plan.apply_rows_in_place(d_rotated.data_mut());
        }
        let (dx, dgain) = rmsnorm_backward(&saved.x, &self.gain, DEFAULT_RMS_EPS, &d_rotated)?;
        Ok(HBitLinearGrads { dx, dweight, dgain })
    }
}
