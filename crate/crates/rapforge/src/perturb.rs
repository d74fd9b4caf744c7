//! Perturbation post-processing: l-infinity projection into the budget,
//! Gaussian smoothing of the raw generator output, and the seeded noise
//! baseline.
//!
//! Projection implements `clip(min(x + eps, max(g, x - eps)))`: the raw
//! generator output is first pulled inside the per-pixel band `x ± eps`,
//! then clipped to the pixel range. Smoothing, when enabled, runs on the
//! unrestricted generator output *before* projection, so the budget always
//! holds exactly on the final adversary.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{kernels, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// l-infinity budget in pixel units plus the valid pixel range.
///
/// Pixels are normalized to `[0, 1]`; budgets quoted on the 0-255 scale
/// (e.g. 10/16/32) enter through [`PerturbationBudget::from_255`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub pixel_min: f64,
    pub pixel_max: f64,
}

impl PerturbationBudget {
    pub fn new(epsilon: f64) -> Result<PerturbationBudget> {
        let b = PerturbationBudget {
            epsilon,
            pixel_min: 0.0,
            pixel_max: 1.0,
        };
        if !(epsilon > 0.0 && epsilon <= b.pixel_max - b.pixel_min) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {epsilon} outside (0, {}]",
                b.pixel_max - b.pixel_min
            )));
        }
        Ok(b)
    }

    /// Budget quoted in 0-255 pixel units.
    pub fn from_255(epsilon_255: f64) -> Result<PerturbationBudget> {
        PerturbationBudget::new(epsilon_255 / 255.0)
    }
}

/// Project raw generator output into the budget around `x`:
/// `clip(min(x + eps, max(g_out, x - eps)), pixel_min, pixel_max)`.
pub fn project(x: &Tensor, g_out: &Tensor, budget: &PerturbationBudget) -> Result<Tensor> {
    let eps = budget.epsilon;
    let (lo, hi) = (budget.pixel_min, budget.pixel_max);
    x.zip_map(g_out, "project", |xv, gv| {
        (xv + eps).min(gv.max(xv - eps)).clamp(lo, hi)
    })
}

/// Graph form of [`project`]; gradient flows through `g_out` wherever it is
/// the active side of the min/max/clamp chain.
pub fn project_var<'g>(x: Var<'g>, g_out: Var<'g>, budget: &PerturbationBudget) -> Result<Var<'g>> {
    let lo_band = x.add_scalar(-budget.epsilon);
    let hi_band = x.add_scalar(budget.epsilon);
    // max/min with g_out first so ties route the gradient into the generator.
    Ok(g_out
        .max(&lo_band)?
        .min(&hi_band)?
        .clamp(budget.pixel_min, budget.pixel_max))
}

/// Normalized, symmetric Gaussian smoothing kernel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmoothingKernel {
    pub size: usize,
    pub sigma: f64,
    #[serde(skip)]
    weights: Option<Tensor>,
}

impl SmoothingKernel {
    pub fn weights(&self) -> Tensor {
        match &self.weights {
            Some(w) => w.clone(),
            None => gaussian_kernel(self.size, self.sigma)
                .expect("stored kernel parameters are valid")
                .weights
                .expect("gaussian_kernel fills weights"),
        }
    }
}

impl PartialEq for SmoothingKernel {
    fn eq(&self, other: &Self) -> bool {
        self.size == other.size && self.sigma == other.sigma
    }
}

/// Build a `size x size` Gaussian kernel with standard deviation `sigma`,
/// weights proportional to `exp(-(di^2 + dj^2) / (2 sigma^2))` and
/// normalized to sum 1. `size` must be odd.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<SmoothingKernel> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel size must be odd and positive, got {size}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let center = (size / 2) as isize;
    let mut weights = vec![0.0; size * size];
    let mut sum = 0.0;
    for i in 0..size {
        for j in 0..size {
            let di = i as isize - center;
            let dj = j as isize - center;
            let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            weights[i * size + j] = v;
            sum += v;
        }
    }
    for w in &mut weights {
        *w /= sum;
    }
    Ok(SmoothingKernel {
        size,
        sigma,
        weights: Some(Tensor::from_vec(&[size, size], weights)?),
    })
}

/// Depthwise Gaussian smoothing with reflect padding; output shape equals
/// input shape. Applied to the raw generator output before projection.
pub fn smooth(g_out: &Tensor, kernel: &SmoothingKernel) -> Result<Tensor> {
    let shape = g_out.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "smooth",
            lhs: shape,
            rhs: vec![4],
        });
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let k = kernel.size;
    if k > h || k > w {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than smoothing kernel {k}"
        )));
    }
    if k == 1 {
        return Ok(g_out.clone());
    }
    let pad = k / 2;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; b * c * ph * pw];
    kernels::reflect_pad2d_forward(g_out.data(), &mut padded, b * c, h, w, pad);
    let mut out = vec![0.0; b * c * h * w];
    kernels::depthwise_conv2d_forward(&padded, kernel.weights().data(), &mut out, b * c, ph, pw, k, k);
    Tensor::from_vec(&shape, out)
}

/// Graph form of [`smooth`] so gradients pass through the smoothing step
/// during training.
pub fn smooth_var<'g>(g: &'g Graph, g_out: Var<'g>, kernel: &SmoothingKernel) -> Result<Var<'g>> {
    let k = kernel.size;
    let shape = g_out.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "smooth",
            lhs: shape,
            rhs: vec![4],
        });
    }
    if k > shape[2] || k > shape[3] {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than smoothing kernel {k}",
            shape[2], shape[3]
        )));
    }
    if k == 1 {
        return Ok(g_out);
    }
    let weights = g.constant(&kernel.weights())?;
    g_out.reflect_pad2d(k / 2)?.depthwise_conv2d(&weights)
}

/// Additive Gaussian noise baseline: `x + n`, `n ~ Normal(0, eps/2)` i.i.d.,
/// pushed through the same projection as generator output.
pub fn gaussian_noise_baseline(x: &Tensor, budget: &PerturbationBudget, seed: u64) -> Result<Tensor> {
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, budget.epsilon / 2.0)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
    let noised = Tensor::from_fn(x.shape(), |i| x.data()[i] + normal.sample(&mut rng));
    project(x, &noised, budget)
}

/// Uniform random image in the pixel range (attack-agnostic test helper).
pub fn random_image(shape: &[usize], budget: &PerturbationBudget, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(budget.pixel_min..budget.pixel_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn scalar_budget(eps: f64) -> PerturbationBudget {
        PerturbationBudget::new(eps).unwrap()
    }

    #[test]
    fn project_formula_cases() {
        let b = scalar_budget(0.1);
        let x = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let g = Tensor::from_vec(&[1], vec![0.9]).unwrap();
        assert!((project(&x, &g, &b).unwrap().item() - 0.6).abs() < 1e-15);

        // zero perturbation is a fixed point
        let same = project(&x, &x, &b).unwrap();
        assert_eq!(same.data(), x.data());

        // stepwise example near the pixel floor
        let x = Tensor::from_vec(&[1], vec![0.05]).unwrap();
        let g = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let out = project(&x, &g, &b).unwrap();
        assert!((out.item() - 0.0).abs() < 1e-15);
        assert!((out.item() - x.item()).abs() <= b.epsilon);
    }

    #[test]
    fn project_is_idempotent_and_exact_under_extreme_outputs() {
        let mut rng = rng_from_seed(7);
        let b = scalar_budget(8.0 / 255.0);
        for _ in 0..200 {
            let x = random_image(&[1, 1, 4, 4], &b, &mut rng);
            let mut g = Tensor::rand_uniform(&[1, 1, 4, 4], -0.5, 1.5, &mut rng);
            // spike a couple of entries to huge magnitudes
            g.data_mut()[3] = 1e9;
            g.data_mut()[7] = -1e9;
            let p1 = project(&x, &g, &b).unwrap();
            assert!(p1.linf_distance(&x).unwrap() <= b.epsilon);
            assert!(p1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let p2 = project(&x, &p1, &b).unwrap();
            assert_eq!(p1.data(), p2.data());
        }
    }

    #[test]
    fn project_var_matches_value_path_and_passes_gradient() {
        let mut rng = rng_from_seed(8);
        let b = scalar_budget(0.1);
        let x = random_image(&[1, 1, 3, 3], &b, &mut rng);
        let raw = Tensor::rand_uniform(&[1, 1, 3, 3], -0.5, 1.5, &mut rng);

        let g = Graph::new();
        let xv = g.constant(&x).unwrap();
        let rv = g.param(&raw).unwrap();
        let proj = project_var(xv, rv, &b).unwrap();
        assert_eq!(proj.value().data(), project(&x, &raw, &b).unwrap().data());

        proj.sum_all().backward().unwrap();
        let grad = rv.grad().unwrap();
        // gradient is 1 exactly where the raw output lies strictly inside
        // the active band, 0 where a bound clipped it
        for (i, (&gv, &rvv)) in grad.data().iter().zip(raw.data()).enumerate() {
            let inside = rvv > x.data()[i] - b.epsilon
                && rvv < x.data()[i] + b.epsilon
                && (0.0..=1.0).contains(&rvv);
            if inside {
                assert_eq!(gv, 1.0, "element {i} should pass gradient");
            }
        }
    }

    #[test]
    fn gaussian_kernel_oracle_values() {
        // size 1 is a single tap
        let k1 = gaussian_kernel(1, 1.0).unwrap();
        assert_eq!(k1.weights().data(), &[1.0]);

        // size 3, sigma 1: center weight 1 / (1 + 4 e^{-1/2} + 4 e^{-1})
        let k3 = gaussian_kernel(3, 1.0).unwrap();
        let expect = 1.0 / (1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp());
        let center = k3.weights().data()[4];
        assert!((center - expect).abs() < 1e-12);

        // normalization for a large kernel
        let k11 = gaussian_kernel(11, 1.0).unwrap();
        let sum: f64 = k11.weights().data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        assert!(gaussian_kernel(4, 1.0).is_err());
        assert!(gaussian_kernel(0, 1.0).is_err());
        assert!(gaussian_kernel(3, 0.0).is_err());
    }

    #[test]
    fn kernel_symmetry_under_rotation_and_reflection() {
        let k = gaussian_kernel(5, 1.3).unwrap();
        let w = k.weights();
        let at = |i: usize, j: usize| w.data()[i * 5 + j];
        for i in 0..5 {
            for j in 0..5 {
                assert!((at(i, j) - at(j, i)).abs() < 1e-15); // transpose
                assert!((at(i, j) - at(4 - i, j)).abs() < 1e-15); // vertical flip
                assert!((at(i, j) - at(4 - j, 4 - i)).abs() < 1e-15); // 90 deg
            }
        }
    }

    #[test]
    fn smoothing_fixes_constant_images_and_reproduces_impulse() {
        let k = gaussian_kernel(3, 1.0).unwrap();
        let flat = Tensor::filled(&[1, 1, 7, 7], 0.37);
        let s = smooth(&flat, &k).unwrap();
        for &v in s.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }

        // identity for a single-tap kernel
        let k1 = gaussian_kernel(1, 1.0).unwrap();
        let x = Tensor::rand_uniform(&[1, 1, 5, 5], 0.0, 1.0, &mut rng_from_seed(9));
        assert_eq!(smooth(&x, &k1).unwrap().data(), x.data());

        // impulse response reproduces the kernel around the center
        let mut impulse = Tensor::zeros(&[1, 1, 7, 7]);
        impulse.data_mut()[3 * 7 + 3] = 1.0;
        let resp = smooth(&impulse, &k).unwrap();
        let kw = k.weights();
        for di in 0..3 {
            for dj in 0..3 {
                let got = resp.data()[(2 + di) * 7 + (2 + dj)];
                assert!((got - kw.data()[di * 3 + dj]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smooth_rejects_images_smaller_than_kernel() {
        let k = gaussian_kernel(5, 1.0).unwrap();
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(smooth(&x, &k).is_err());
    }

    #[test]
    fn smooth_var_matches_value_path() {
        let mut rng = rng_from_seed(12);
        let k = gaussian_kernel(3, 1.0).unwrap();
        let x = Tensor::rand_uniform(&[2, 1, 6, 6], -1.0, 2.0, &mut rng);
        let g = Graph::new();
        let xv = g.param(&x).unwrap();
        let sv = smooth_var(&g, xv, &k).unwrap();
        let expect = smooth(&x, &k).unwrap();
        for (a, b) in sv.value().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // and gradient flows
        sv.sum_all().backward().unwrap();
        assert!(xv.grad().is_some());
    }

    #[test]
    fn smooth_then_project_preserves_budget_exactly() {
        let mut rng = rng_from_seed(10);
        let b = scalar_budget(16.0 / 255.0);
        let k = gaussian_kernel(3, 1.0).unwrap();
        for _ in 0..20 {
            let x = random_image(&[1, 1, 8, 8], &b, &mut rng);
            let raw = Tensor::rand_uniform(&[1, 1, 8, 8], -2.0, 3.0, &mut rng);
            let adv = project(&x, &smooth(&raw, &k).unwrap(), &b).unwrap();
            assert!(adv.linf_distance(&x).unwrap() <= b.epsilon);
        }
    }

    #[test]
    fn noise_baseline_respects_budget_and_seed() {
        let mut rng = rng_from_seed(11);
        let b = scalar_budget(16.0 / 255.0);
        let x = random_image(&[2, 1, 6, 6], &b, &mut rng);
        let n1 = gaussian_noise_baseline(&x, &b, 123).unwrap();
        let n2 = gaussian_noise_baseline(&x, &b, 123).unwrap();
        let n3 = gaussian_noise_baseline(&x, &b, 124).unwrap();
        assert_eq!(n1.data(), n2.data());
        assert_ne!(n1.data(), n3.data());
        assert!(n1.linf_distance(&x).unwrap() <= b.epsilon);
        assert!(n1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn budget_validation() {
        assert!(PerturbationBudget::new(0.0).is_err());
        assert!(PerturbationBudget::new(1.5).is_err());
        let b = PerturbationBudget::from_255(10.0).unwrap();
        assert!((b.epsilon - 10.0 / 255.0).abs() < 1e-15);
    }
}
