//! Central-difference gradient oracle, independent of the tape's
//! backward rules. Runs at f64 only; that is what it is for.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// (f(x + h·e_i) − f(x − h·e_i)) / 2h for every element of `x`.
/// `f` must be deterministic.
pub fn finite_difference_grad<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidSpec(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let slope = (up - down) / (2.0 * h);
        if !slope.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_grad" });
        }
        grad.data_mut()[i] = slope;
    }
    Ok(grad)
}

/// Largest relative error between two gradients, counting only elements
/// where the reference exceeds `floor` in magnitude.
pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        if a.abs() > floor {
            worst = worst.max((a - n).abs() / a.abs());
        }
    }
    worst
}
