use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RMS_EPS: f32 = 1e-6;

fn check(x: &Tensor, gain: &Tensor) -> Result<usize> {
    let n = x.last_dim();
    if gain.len() != n {
        return Err(Error::shape(format!(
            "gain has {} entries for feature dim {n}",
            gain.len()
        )));
    }
    Ok(n)
}

#[inline]
fn inv_rms(row: &[f32], eps: f32) -> f32 {
    let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
    1.0 / (ms + eps).sqrt()
}

/// `y = x / sqrt(mean(x²) + eps) · gain`, row by row over the last dimension.
pub fn rmsnorm_forward(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let n = check(x, gain)?;
    let g = gain.data();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(n) {
        let r = inv_rms(row, eps);
        out.extend(row.iter().zip(g).map(|(v, gi)| v * r * gi));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Returns `(dx, dgain)` for upstream gradient `dy`.
pub fn rmsnorm_backward(
    x: &Tensor,
    gain: &Tensor,
    eps: f32,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let n = check(x, gain)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape(format!(
            "upstream {:?} vs input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let g = gain.data();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgain = vec![0.0f32; n];
    for (row, dyr) in x.data().chunks_exact(n).zip(dy.data().chunks_exact(n)) {
        let r = inv_rms(row, eps);
        // d/dx_i of x_j r g_j dy_j = r g_i dy_i - x_i r³/n Σ_j x_j g_j dy_j
        let proj: f32 = row
            .iter()
            .zip(g)
            .zip(dyr)
            .map(|((x, g), d)| x * g * d)
            .sum();
        let c = r * r * r * proj / n as f32;
        dx.extend(
            row.iter()
                .zip(g)
                .zip(dyr)
                .map(|((x, g), d)| r * g * d - x * c),
        );
        for ((dg, x), d) in dgain.iter_mut().zip(row).zip(dyr) {
            *dg += d * x * r;
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![n], dgain),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_rms_fixed_point() {
        let x = Tensor::filled(&[1, 4], 1.0);
        let y = rmsnorm_forward(&x, &Tensor::filled(&[4], 1.0), 0.0).unwrap();
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn rms_two() {
        let x = Tensor::filled(&[1, 2], 2.0);
        let y = rmsnorm_forward(&x, &Tensor::filled(&[2], 1.0), 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0]);
    }

    #[test]
    fn gain_length_checked() {
        let x = Tensor::zeros(&[2, 4]);
        assert!(rmsnorm_forward(&x, &Tensor::zeros(&[3]), 1e-6).is_err());
    }
}
