//! Central finite differences: the independent oracle for every analytic
//! gradient in the crate.

use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference gradient estimate of a scalar-valued function:
/// `(f(x + h·e_i) - f(x - h·e_i)) / (2h)` per coordinate.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    assert!(h > 0.0, "step size must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::from_vec(x.shape(), grad)
}

/// `ǁa - bǁ₂ / max(ǁbǁ₂, floor)`: the relative error measure used by the
/// gradient checks (norm-level, so near-zero single components don't blow
/// up the ratio).
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let g = finite_difference_grad(&mut |t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_at_three() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_difference_grad(&mut |t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }
}
