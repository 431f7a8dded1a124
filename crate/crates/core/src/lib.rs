//! Numerical core for ternary-weight transformers with Hadamard-rotated
//! low-bit activations.
//!
//! * [`tensor`]: dense `f32` tensors and the `.bnt` file format
//! * [`hadamard`]: orthonormal fast Walsh-Hadamard transform
//! * [`quant`]: ternary, INT8, INT4 and unsigned KV quantizers
//! * [`kernels`]: packed trit/nibble storage and the exact integer GEMM
//! * [`layers`]: RMSNorm, BitLinear, H-BitLinear, attention and the block
//! * [`toytrain`]: desk-scale quantization-aware training and ablations
//! * [`diagnostics`]: distribution statistics and rotation comparisons

pub mod diagnostics;
pub mod error;
pub mod hadamard;
pub mod kernels;
pub mod layers;
mod linalg;
pub mod quant;
pub mod tensor;
pub mod toytrain;

pub use error::{Error, Result};
pub use tensor::Tensor;
