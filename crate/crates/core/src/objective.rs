//! Training losses.

use autodiff::{Graph, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::image::Image;

const PERCEPTUAL_SEED: u64 = 0x9e37_79b9;
const PERCEPTUAL_CHANNELS: [usize; 5] = [3, 8, 16, 16, 16];

/// Fixed random conv pyramid: four 3×3 stride-2 ReLU stages. The distance
/// is the mean over stages of the mean squared feature difference.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    weights: Vec<Vec<f32>>,
    biases: Vec<Vec<f32>>,
}

impl Default for PerceptualProxy {
    fn default() -> Self {
        PerceptualProxy::new(PERCEPTUAL_SEED)
    }
}

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in PERCEPTUAL_CHANNELS.windows(2) {
            let (cin, cout) = (pair[0], pair[1]);
            let std = (2.0 / (9 * cin) as f32).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            weights.push((0..9 * cin * cout).map(|_| normal.sample(&mut rng)).collect());
            biases.push((0..cout).map(|_| 0.01 * normal.sample(&mut rng)).collect());
        }
        PerceptualProxy { weights, biases }
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    fn features<'p>(&self, g: &mut Graph<'p>, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.stages());
        let mut h = x;
        for (s, pair) in PERCEPTUAL_CHANNELS.windows(2).enumerate() {
            let w = g.input(self.weights[s].clone(), &[3, 3, pair[0], pair[1]]);
            let b = g.input(self.biases[s].clone(), &[pair[1]]);
            let c = g.conv2d(h, w, Some(b), 2, 1);
            h = g.relu(c);
            out.push(h);
        }
        out
    }

    /// `pred`: `[H, W, 3]` node.
    pub fn distance_node<'p>(&self, g: &mut Graph<'p>, pred: Var, target: &Image) -> Var {
        let t = g.input(target.data.clone(), &[target.height, target.width, 3]);
        let fp = self.features(g, pred);
        let ft = self.features(g, t);
        let terms: Vec<Var> = fp.iter().zip(&ft).map(|(&a, &b)| g.sq_diff_mean(a, b)).collect();
        let rows: Vec<Var> = terms.iter().map(|&v| g.reshape(v, &[1, 1])).collect();
        let stacked = g.concat_rows(&rows);
        g.mean(stacked)
    }

    pub fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        check_same(a, b)?;
        let mut g = Graph::new();
        let x = g.input(a.data.clone(), &[a.height, a.width, 3]);
        let d = self.distance_node(&mut g, x, b);
        Ok(f64::from(g.scalar(d)))
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "{}×{} vs {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `(l2, perceptual)` for one predicted view on the tape.
pub fn recon_loss_node<'p>(g: &mut Graph<'p>, proxy: &PerceptualProxy, pred: Var, target: &Image) -> (Var, Var) {
    let l2 = g.mse_const(pred, target.data.clone());
    let img = g.reshape(pred, &[target.height, target.width, 3]);
    (l2, proxy.distance_node(g, img, target))
}

/// `(l2, perceptual)` averaged over views.
pub fn recon_loss(proxy: &PerceptualProxy, pred: &[Image], target: &[Image]) -> Result<(f64, f64)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    let (mut l2, mut perc) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        check_same(p, t)?;
        l2 += p
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum::<f64>()
            / p.data.len() as f64;
        perc += proxy.distance(p, t)?;
    }
    let n = pred.len() as f64;
    Ok((l2 / n, perc / n))
}

/// `mean_i max(0, ‖μ_i − r_{q(i)}‖ − δ)²` with `refs` flattened `[M, 3]`.
pub fn offset_reg(gs: &GaussianSet, refs: &[f32], delta: f64) -> Result<f64> {
    let prov = gs.provenance.as_ref().ok_or(Error::MissingProvenance)?;
    if gs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (g, &q) in gs.gaussians.iter().zip(prov) {
        let r = &refs[q as usize * 3..q as usize * 3 + 3];
        let d = (0..3).map(|a| f64::from(g.mu[a] - r[a]).powi(2)).sum::<f64>().sqrt();
        total += (d - delta).max(0.0).powi(2);
    }
    Ok(total / gs.len() as f64)
}

/// Tape version over decoded means `[N, 3]` and per-Gaussian anchors `[N, 3]`.
pub fn offset_reg_node<'p>(g: &mut Graph<'p>, mu: Var, anchors: Var, delta: f32) -> Var {
    let diff = g.sub(mu, anchors);
    let n = g.row_norm(diff);
    let excess = g.add_scalar(n, -delta);
    let hinge = g.relu(excess);
    let sq = g.square(hinge);
    g.mean(sq)
}

/// Mean squared difference between coverage and mask.
pub fn opacity_loss(coverage: &[f32], mask: &[f32]) -> Result<f64> {
    if coverage.len() != mask.len() {
        return Err(Error::Shape(format!("{} vs {}", coverage.len(), mask.len())));
    }
    if coverage.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = coverage.iter().zip(mask).map(|(c, m)| f64::from(c - m).powi(2)).sum();
    Ok(s / coverage.len() as f64)
}

/// `λ_L2·l2 + λ_perc·perceptual`.
pub fn weighted_recon(cfg: &TrainConfig, l2: f64, perceptual: f64) -> f64 {
    f64::from(cfg.lambda_l2) * l2 + f64::from(cfg.lambda_perc) * perceptual
}

/// Mean weighted reconstruction loss over the intermediate layers.
/// `layers[l]` holds layer `l`'s renders; the last entry is the final
/// layer and is excluded.
pub fn multilayer_loss(
    cfg: &TrainConfig,
    proxy: &PerceptualProxy,
    layers: &[Vec<Image>],
    targets: &[Image],
) -> Result<f64> {
    if layers.len() < 2 {
        return Ok(0.0);
    }
    let inter = &layers[..layers.len() - 1];
    let mut sum = 0.0;
    for renders in inter {
        let (l2, perc) = recon_loss(proxy, renders, targets)?;
        sum += weighted_recon(cfg, l2, perc);
    }
    Ok(sum / inter.len() as f64)
}

/// Per-term loss values of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2: f64,
    pub perceptual: f64,
    pub opacity: f64,
    pub offset_reg: f64,
    pub inter: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cfg: &TrainConfig, l2: f64, perceptual: f64, opacity: f64, offset_reg: f64, inter: f64) -> Self {
        let mut b = LossBreakdown {
            l2,
            perceptual,
            opacity,
            offset_reg,
            inter,
            total: 0.0,
        };
        b.total = b.weighted_total(cfg);
        b
    }

    pub fn weighted_total(&self, cfg: &TrainConfig) -> f64 {
        weighted_recon(cfg, self.l2, self.perceptual)
            + f64::from(cfg.lambda_occ) * self.opacity
            + f64::from(cfg.lambda_reg) * self.offset_reg
            + f64::from(cfg.lambda_inter) * self.inter
    }

    pub fn is_finite(&self) -> bool {
        [self.l2, self.perceptual, self.opacity, self.offset_reg, self.inter, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Running mean helper: `self += other / n`.
    pub fn accumulate(&mut self, other: &LossBreakdown, n: usize) {
        let w = 1.0 / n as f64;
        self.l2 += other.l2 * w;
        self.perceptual += other.perceptual * w;
        self.opacity += other.opacity * w;
        self.offset_reg += other.offset_reg * w;
        self.inter += other.inter * w;
        self.total += other.total * w;
    }
}
