use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function, evaluated in f64.
///
/// Used as a test oracle; `f` receives the perturbed point as a flat f64
/// vector in the row-major order of `point`.
pub fn finite_difference<F>(mut f: F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference",
            reason: format!("step {h} must be positive"),
        });
    }
    let mut x: Vec<f64> = point.data().iter().map(|&v| v as f64).collect();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(TensorError::NonFinite { op: "finite_difference" });
        }
        out.push(((up - down) / (2.0 * h)) as f32);
    }
    Tensor::new(point.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference(|x| Ok(x[0] * x[0]), &Tensor::scalar(3.0), 1e-3).unwrap();
        assert!((g.data()[0] - 6.0).abs() <= 1e-6);
    }

    #[test]
    fn constant_is_zero() {
        let p = Tensor::full(&[2, 2], 0.3).unwrap();
        let g = finite_difference(|_| Ok(1.5), &p, 1e-3).unwrap();
        assert_eq!(g, Tensor::zeros(&[2, 2]).unwrap());
    }

    #[test]
    fn rejects_bad_step_and_nonfinite() {
        assert!(finite_difference(|_| Ok(0.0), &Tensor::scalar(1.0), 0.0).is_err());
        assert!(finite_difference(|x| Ok(1.0 / (x[0] - 1.001)), &Tensor::scalar(1.0), 1e-3).is_err());
    }
}
