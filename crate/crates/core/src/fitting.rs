//! Direct optimization of a Gaussian set against posed images through the
//! renderer, without any network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian3D, GaussianSet, FLOATS_PER_GAUSSIAN};
use crate::geometry::CameraPose;
use crate::image::Image;
use crate::metrics::psnr;
use crate::splatter::{render_backward, render_params, RenderSettings};

/// Unconstrained parameters: means, log-scales, raw quaternions and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGaussians {
    pub data: Vec<f64>,
    pub max_scale: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

impl RawGaussians {
    pub fn from_set(gs: &GaussianSet, max_scale: f64) -> Self {
        let mut data = Vec::with_capacity(gs.len() * FLOATS_PER_GAUSSIAN);
        for g in &gs.gaussians {
            data.extend(g.mu.map(f64::from));
            data.extend(g.scale.map(|s| f64::from(s).max(1e-6).ln()));
            data.extend(g.rot.map(f64::from));
            data.extend(g.color.map(|c| logit(f64::from(c))));
            data.push(logit(f64::from(g.opacity)));
        }
        RawGaussians { data, max_scale }
    }

    pub fn len(&self) -> usize {
        self.data.len() / FLOATS_PER_GAUSSIAN
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Activated parameters in file field order.
    pub fn activate(&self) -> Vec<f64> {
        let mut out = self.data.clone();
        for p in out.chunks_mut(FLOATS_PER_GAUSSIAN) {
            for s in &mut p[3..6] {
                *s = s.exp().min(self.max_scale);
            }
            let n = p[6..10].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            p[6..10].iter_mut().for_each(|v| *v /= n);
            for c in &mut p[10..14] {
                *c = sigmoid(*c);
            }
        }
        out
    }

    /// Chain a gradient w.r.t. activated parameters back to raw ones.
    /// Quaternion normalization is handled by the renderer's own backward.
    pub fn backprop(&self, activated: &[f64], grad: &[f64]) -> Vec<f64> {
        let mut out = grad.to_vec();
        for (i, g) in out.chunks_mut(FLOATS_PER_GAUSSIAN).enumerate() {
            let a = &activated[i * FLOATS_PER_GAUSSIAN..(i + 1) * FLOATS_PER_GAUSSIAN];
            let r = &self.data[i * FLOATS_PER_GAUSSIAN..(i + 1) * FLOATS_PER_GAUSSIAN];
            for k in 3..6 {
                g[k] = if r[k].exp() >= self.max_scale { 0.0 } else { g[k] * a[k] };
            }
            for k in 10..14 {
                g[k] *= a[k] * (1.0 - a[k]);
            }
        }
        out
    }

    pub fn to_set(&self) -> GaussianSet {
        let act = self.activate();
        GaussianSet::new(
            act.chunks(FLOATS_PER_GAUSSIAN)
                .map(|p| Gaussian3D::from_slice(&p.iter().map(|v| *v as f32).collect::<Vec<_>>()))
                .collect(),
        )
    }
}

/// Per-field learning rates (means, scales, rotations, colors, opacities).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub steps: usize,
    pub lr: [f64; 5],
    pub beta1: f64,
    pub beta2: f64,
    pub max_scale: f64,
    /// Learning rates decay exponentially to this fraction by the last step.
    pub final_lr_fraction: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            steps: 2000,
            lr: [1e-2, 3e-2, 5e-3, 5e-2, 5e-2],
            beta1: 0.9,
            beta2: 0.999,
            max_scale: 0.5,
            final_lr_fraction: 0.05,
        }
    }
}

fn field_of(k: usize) -> usize {
    match k {
        0..=2 => 0,
        3..=5 => 1,
        6..=9 => 2,
        10..=12 => 3,
        _ => 4,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// Mean squared error over all views, per step.
    pub mse: Vec<f64>,
    /// Mean PSNR over views after the last step.
    pub final_psnr: f64,
}

/// Random initial set spread over `[-extent, extent]³`.
pub fn random_init(rng: &mut impl Rng, n: usize, extent: f32) -> GaussianSet {
    GaussianSet::new(
        (0..n)
            .map(|_| Gaussian3D {
                mu: std::array::from_fn(|_| rng.random_range(-extent..extent)),
                scale: [0.06; 3],
                rot: [1.0, 0.0, 0.0, 0.0],
                color: std::array::from_fn(|_| rng.random_range(0.3..0.7)),
                opacity: 0.5,
            })
            .collect(),
    )
}

/// Minimize the mean squared error to `targets` over all views with Adam,
/// one full-batch step per iteration.
pub fn fit_gaussians(
    init: &GaussianSet,
    poses: &[CameraPose],
    targets: &[Image],
    settings: &FitSettings,
) -> Result<(GaussianSet, FitTrace)> {
    if poses.len() != targets.len() || poses.is_empty() {
        return Err(Error::Shape(format!("{} poses vs {} targets", poses.len(), targets.len())));
    }
    let (h, w) = (targets[0].height, targets[0].width);
    let rs = RenderSettings::default();
    let mut raw = RawGaussians::from_set(init, settings.max_scale);
    let n = raw.data.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut trace = Vec::with_capacity(settings.steps);
    let npix = (h * w * 3) as f64;
    let nv = poses.len() as f64;
    for step in 1..=settings.steps {
        let act = raw.activate();
        let mut grad = vec![0.0; n];
        let mut loss = 0.0;
        for (pose, target) in poses.iter().zip(targets) {
            let out = render_params(&act, pose, h, w, &rs);
            let mut g_rgb = vec![0.0; out.rgb.len()];
            for i in 0..out.rgb.len() {
                let d = out.rgb[i] - f64::from(target.data[i]);
                loss += d * d / (npix * nv);
                g_rgb[i] = 2.0 * d / (npix * nv);
            }
            let g = render_backward(&act, pose, &out, &g_rgb, &vec![0.0; h * w], &rs);
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        trace.push(loss);
        let grad = raw.backprop(&act, &grad);
        let bc1 = 1.0 - settings.beta1.powi(step as i32);
        let bc2 = 1.0 - settings.beta2.powi(step as i32);
        let decay = settings.final_lr_fraction.powf((step - 1) as f64 / settings.steps.max(1) as f64);
        for i in 0..n {
            m[i] = settings.beta1 * m[i] + (1.0 - settings.beta1) * grad[i];
            v[i] = settings.beta2 * v[i] + (1.0 - settings.beta2) * grad[i] * grad[i];
            let lr = decay * settings.lr[field_of(i % FLOATS_PER_GAUSSIAN)];
            raw.data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + 1e-12);
        }
    }
    let gs = raw.to_set();
    let mut total = 0.0;
    for (pose, target) in poses.iter().zip(targets) {
        let out = render_params(&raw.activate(), pose, h, w, &rs);
        let img = Image::new(w, h, out.rgb.iter().map(|v| *v as f32).collect());
        total += psnr(&img, target)?;
    }
    Ok((
        gs,
        FitTrace {
            mse: trace,
            final_psnr: total / nv,
        },
    ))
}
