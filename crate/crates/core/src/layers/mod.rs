//! Transformer building blocks with explicit forward and backward passes.
//!
//! Layers that need a backward pass keep the context of their most recent
//! forward call; calling `backward` consumes it.

mod attention;
mod block;
mod linear;
mod rmsnorm;
mod rope;

use serde::{Deserialize, Serialize};

use crate::quant::ActBits;

pub use attention::{Attention, KvQuant};
pub use block::{Block, BlockCaptures, BlockConfig, BlockParams};
pub use linear::{BitLinear, HBitLinear, HBitLinearGrads, LinearGrads};
pub use rmsnorm::{rmsnorm_backward, rmsnorm_forward, DEFAULT_RMS_EPS};
pub use rope::{Rope, ROPE_BASE};

/// Numeric mode of the linear layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// No quantizers anywhere: plain `f32` matmuls.
    Full,
    /// Ternary weights with INT8 activations.
    A8,
    /// Ternary weights with INT4 activations.
    A4,
}

impl Precision {
    pub fn act_bits(self) -> Option<ActBits> {
        match self {
            Precision::Full => None,
            Precision::A8 => Some(ActBits::A8),
            Precision::A4 => Some(ActBits::A4),
        }
    }
}

impl From<ActBits> for Precision {
    fn from(bits: ActBits) -> Self {
        match bits {
            ActBits::A8 => Precision::A8,
            ActBits::A4 => Precision::A4,
        }
    }
}

/// Where the Hadamard transform is applied inside an H-BitLinear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    /// Identity in place of the transform (ablation).
    None,
    /// `Q_w(W) · Q(H · LN(x))`
    Activation,
    /// `Q_w(W H) · Q(H · LN(x))`: each weight row is rotated before
    /// ternarization.
    WeightActivation,
}

impl Rotation {
    pub fn rotates_activations(self) -> bool {
        !matches!(self, Rotation::None)
    }
}
