//! Finite-difference validation of the renderer's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gaussians::{GaussianSet, FLOATS_PER_GAUSSIAN};
use crate::geometry::CameraPose;
use crate::splatter::{render_backward, render_params, RenderSettings};

pub const FIELD_NAMES: [&str; 5] = ["mu", "scale", "rot", "color", "opacity"];

fn field_of(k: usize) -> usize {
    match k {
        0..=2 => 0,
        3..=5 => 1,
        6..=9 => 2,
        10..=12 => 3,
        _ => 4,
    }
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error over all compared parameters, with denominator
    /// `max(|g|, |fd|, 1e-6)`.
    pub max_rel_error: f64,
    /// Same, per field in `FIELD_NAMES` order.
    pub per_field: [f64; 5],
    pub checked: usize,
    /// Perturbations that changed the depth order or which pixels a splat
    /// contributes to; the loss is not differentiable across those.
    pub excluded: usize,
    /// Whether any analytic gradient was NaN or infinite.
    pub non_finite: bool,
}

/// Fixed random linear readout of color and coverage used as the loss.
pub struct LinearImageLoss {
    pub rgb_weights: Vec<f64>,
    pub alpha_weights: Vec<f64>,
}

impl LinearImageLoss {
    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearImageLoss {
            rgb_weights: (0..height * width * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            alpha_weights: (0..height * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    pub fn eval(&self, rgb: &[f64], alpha: &[f64]) -> f64 {
        let a: f64 = rgb.iter().zip(&self.rgb_weights).map(|(x, w)| x * w).sum();
        let b: f64 = alpha.iter().zip(&self.alpha_weights).map(|(x, w)| x * w).sum();
        a + b
    }
}

/// Compare renderer gradients against central differences with step `h`
/// for every parameter of every Gaussian.
pub fn gradient_check(gs: &GaussianSet, pose: &CameraPose, height: usize, width: usize, h: f64) -> GradCheckReport {
    let params: Vec<f64> = gs.to_flat().into_iter().map(f64::from).collect();
    gradient_check_params(&params, pose, height, width, h, 0x5eed)
}

pub fn gradient_check_params(
    params: &[f64],
    pose: &CameraPose,
    height: usize,
    width: usize,
    h: f64,
    seed: u64,
) -> GradCheckReport {
    let settings = RenderSettings::default();
    let loss = LinearImageLoss::random(height, width, seed);
    let base = render_params(params, pose, height, width, &settings);
    let analytic = render_backward(params, pose, &base, &loss.rgb_weights, &loss.alpha_weights, &settings);
    let non_finite = analytic.iter().any(|g| !g.is_finite());

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_field: [0.0; 5],
        checked: 0,
        excluded: 0,
        non_finite,
    };
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = render_params(&work, pose, height, width, &settings);
        work[i] = orig - h;
        let minus = render_params(&work, pose, height, width, &settings);
        work[i] = orig;
        if plus.structure_hash != base.structure_hash || minus.structure_hash != base.structure_hash {
            report.excluded += 1;
            continue;
        }
        let fd = (loss.eval(&plus.rgb, &plus.alpha) - loss.eval(&minus.rgb, &minus.alpha)) / (2.0 * h);
        let g = analytic[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        let field = field_of(i % FLOATS_PER_GAUSSIAN);
        report.per_field[field] = report.per_field[field].max(rel);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Gaussian3D;

    fn pose() -> CameraPose {
        CameraPose::identity(20.0, 20.0, 8.0, 8.0)
    }

    #[test]
    fn single_gaussian_color_gradient_is_exact() {
        let g = Gaussian3D {
            mu: [0.02, -0.03, 2.0],
            scale: [0.2, 0.15, 0.1],
            color: [0.3, 0.6, 0.1],
            opacity: 0.8,
            ..Default::default()
        };
        let r = gradient_check(&GaussianSet::new(vec![g]), &pose(), 16, 16, 1e-3);
        assert!(r.per_field[3] < 1e-4, "{r:?}");
        assert!(!r.non_finite);
    }

    #[test]
    fn overlapping_opacity_gradient() {
        let a = Gaussian3D {
            mu: [0.0, 0.0, 2.0],
            scale: [0.2; 3],
            color: [1.0, 0.0, 0.0],
            opacity: 0.6,
            ..Default::default()
        };
        let b = Gaussian3D {
            mu: [0.05, 0.02, 3.0],
            scale: [0.3; 3],
            color: [0.0, 0.0, 1.0],
            opacity: 0.9,
            ..Default::default()
        };
        let r = gradient_check(&GaussianSet::new(vec![a, b]), &pose(), 16, 16, 1e-3);
        assert!(r.per_field[4] < 1e-2, "{r:?}");
    }

    #[test]
    fn tiny_scale_gradients_are_finite() {
        let g = Gaussian3D {
            mu: [0.0, 0.0, 2.0],
            scale: [1e-7, 1e-7, 1e-7],
            ..Default::default()
        };
        let r = gradient_check(&GaussianSet::new(vec![g]), &pose(), 16, 16, 1e-3);
        assert!(!r.non_finite);
        assert!(r.max_rel_error.is_finite());
    }
}
