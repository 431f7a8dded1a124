//! Orthonormal fast Walsh-Hadamard transform.
//!
//! `H_m` is the Sylvester-ordered `2^m x 2^m` matrix with entries `±1/√n`.
//! It is symmetric and orthonormal, so it is its own inverse and the gradient
//! of `y = H x` with respect to `x` is `H g`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this many elements all rows are transformed on the calling thread.
const PAR_MIN_ELEMS: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HadamardPlan {
    n: usize,
    stages: u32,
    scale: f32,
}

impl HadamardPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(n));
        }
        Ok(HadamardPlan {
            n,
            stages: n.trailing_zeros(),
            scale: (1.0 / (n as f64).sqrt()) as f32,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of butterfly stages, `log2(n)`.
    pub fn stages(&self) -> u32 {
        self.stages
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Transforms one length-`n` row in place.
    pub fn apply_in_place(&self, row: &mut [f32]) {
        debug_assert_eq!(row.len(), self.n);
        butterflies(row);
        if self.n > 1 {
            for v in row.iter_mut() {
                *v *= self.scale;
            }
        }
    }

    /// Transforms every consecutive length-`n` row of `data` in place.
    pub fn apply_rows_in_place(&self, data: &mut [f32]) {
        debug_assert_eq!(data.len() % self.n, 0);
        if data.len() >= PAR_MIN_ELEMS && data.len() / self.n > 1 {
            data.par_chunks_mut(self.n)
                .for_each(|row| self.apply_in_place(row));
        } else {
            data.chunks_mut(self.n)
                .for_each(|row| self.apply_in_place(row));
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.last_dim() != self.n {
            return Err(Error::shape(format!(
                "last dimension {} does not match transform length {}",
                x.last_dim(),
                self.n
            )));
        }
        Ok(())
    }
}

/// Unnormalized in-place butterflies; the caller applies `1/√n`.
fn butterflies(row: &mut [f32]) {
    let n = row.len();
    let mut half = 1;
    while half < n {
        for block in row.chunks_exact_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        half *= 2;
    }
}

/// Applies `H_m` to each length-`n` row along the last dimension of `x`.
pub fn hadamard_forward(x: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    plan.check(x)?;
    let mut out = x.clone();
    plan.apply_rows_in_place(out.data_mut());
    Ok(out)
}

/// Gradient of [`hadamard_forward`]: because `H_m` is symmetric and
/// orthonormal, this is the same transform applied to the upstream gradient.
pub fn hadamard_backward(grad: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    hadamard_forward(grad, plan)
}

/// Convenience wrapper building the plan from the last dimension of `x`.
pub fn hadamard(x: &Tensor) -> Result<Tensor> {
    let plan = HadamardPlan::new(x.last_dim())?;
    hadamard_forward(x, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(HadamardPlan::new(6), Err(Error::NotPowerOfTwo(6))));
        assert!(matches!(HadamardPlan::new(0), Err(Error::NotPowerOfTwo(0))));
        let plan = HadamardPlan::new(4).unwrap();
        let x = Tensor::zeros(&[2, 8]);
        assert!(matches!(
            hadamard_forward(&x, &plan),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn unit_vector_n2() {
        let x = Tensor::from_values(&[2], &[1.0, 0.0]).unwrap();
        let y = hadamard(&x).unwrap();
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((y.data()[0] - s).abs() < 1e-6);
        assert!((y.data()[1] - s).abs() < 1e-6);
        let back = hadamard_backward(&y, &HadamardPlan::new(2).unwrap()).unwrap();
        assert!(back.allclose(&x, 1e-6).unwrap());
    }

    #[test]
    fn constant_maps_to_impulse() {
        let x = Tensor::from_values(&[4], &[1.0; 4]).unwrap();
        let y = hadamard(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn length_one_is_identity() {
        let x = Tensor::from_values(&[3, 1], &[1.0, -2.0, 3.5]).unwrap();
        assert_eq!(hadamard(&x).unwrap(), x);
    }

    #[test]
    fn backward_equals_forward_n2() {
        let plan = HadamardPlan::new(2).unwrap();
        let g = Tensor::from_values(&[2], &[0.3, -1.7]).unwrap();
        assert_eq!(
            hadamard_backward(&g, &plan).unwrap(),
            hadamard_forward(&g, &plan).unwrap()
        );
    }
}
