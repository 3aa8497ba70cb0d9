//! Timestep-conditioned image tokens, frustum positional tokens and their
//! fusion into 3D position-aware tokens.

use autodiff::{Graph, Init, ParamId, ParamStore, Var};
use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::{unproject_frustum, CameraPose};
use crate::image::Image;
use crate::nn::{AdaLnBlock, LayerNorm, Linear};

/// Width of the sinusoidal timestep features.
const TIME_FREQ_DIM: usize = 64;

/// Per-view token grid `V × H_F × W_F × d`, row-major per view.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub views: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub features: Vec<f32>,
}

impl TokenGrid {
    pub fn view(&self, v: usize) -> &[f32] {
        let n = self.grid_h * self.grid_w * self.dim;
        &self.features[v * n..(v + 1) * n]
    }
}

/// Image tokens together with the timesteps they were computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokens {
    pub tokens: TokenGrid,
    pub t: Vec<f32>,
}

pub type PosTokens = TokenGrid;

/// `[H, W, 3] → [H_F·W_F, patch²·3]`, patches row-major, pixels within a
/// patch row-major.
pub fn patchify(img: &Image, patch: usize) -> Vec<f32> {
    let (gh, gw) = (img.height / patch, img.width / patch);
    let mut out = Vec::with_capacity(gh * gw * patch * patch * 3);
    for pi in 0..gh {
        for pj in 0..gw {
            for dy in 0..patch {
                let y = pi * patch + dy;
                let row = (y * img.width + pj * patch) * 3;
                out.extend_from_slice(&img.data[row..row + patch * 3]);
            }
        }
    }
    out
}

/// Sinusoidal timestep features (`t` scaled to `[0, 1000]`).
pub fn timestep_features(t: f32) -> Vec<f32> {
    let half = TIME_FREQ_DIM / 2;
    let mut out = vec![0.0; TIME_FREQ_DIM];
    for i in 0..half {
        let freq = (-(10_000f32.ln()) * i as f32 / half as f32).exp();
        let arg = t * 1000.0 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

/// Patch embedding plus a stack of adaLN transformer blocks, run per view.
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub blocks: Vec<AdaLnBlock>,
    pub norm: LayerNorm,
    patch: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.hidden_dim;
        let p = cfg.patch;
        ImageEncoder {
            patch_embed: Linear::new(store, "image.patch_embed", p * p * 3, d, rng),
            pos_embed: store.add("image.pos_embed", &[cfg.tokens_per_view(), d], Init::Normal(0.02), rng),
            time_fc1: Linear::new(store, "image.time_fc1", TIME_FREQ_DIM, d, rng),
            time_fc2: Linear::new(store, "image.time_fc2", d, d, rng),
            blocks: (0..cfg.image_layers)
                .map(|i| {
                    AdaLnBlock::new(
                        store,
                        &format!("image.block{i}"),
                        d,
                        cfg.attention_heads,
                        cfg.mlp_ratio,
                        rng,
                    )
                })
                .collect(),
            norm: LayerNorm::new(store, "image.norm", d, rng),
            patch: p,
        }
    }

    /// One `[T, d]` node per view.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, images: &[&Image], t: &[f32]) -> Result<Vec<Var>> {
        if images.len() != t.len() {
            return Err(Error::Shape(format!(
                "{} images but {} timesteps",
                images.len(),
                t.len()
            )));
        }
        let mut out = Vec::with_capacity(images.len());
        for (img, &tv) in images.iter().zip(t) {
            let expected = s.get(self.pos_embed).shape[0];
            let tokens = (img.height / self.patch) * (img.width / self.patch);
            if tokens != expected || img.height % self.patch != 0 || img.width % self.patch != 0 {
                return Err(Error::Shape(format!(
                    "image {}×{} does not match the configured token grid",
                    img.height, img.width
                )));
            }
            let patches = g.input(patchify(img, self.patch), &[tokens, self.patch * self.patch * 3]);
            let x = self.patch_embed.forward(g, s, patches);
            let pos = g.param(s, self.pos_embed);
            let mut x = g.add(x, pos);
            let tf = g.input(timestep_features(tv), &[1, TIME_FREQ_DIM]);
            let c = self.time_fc1.forward(g, s, tf);
            let c = g.silu(c);
            let cond = self.time_fc2.forward(g, s, c);
            for block in &self.blocks {
                x = block.forward(g, s, x, cond);
            }
            out.push(self.norm.forward(g, s, x));
        }
        Ok(out)
    }
}

/// Pointwise two-layer network over the flattened `d_th × 3` frustum points
/// of each feature pixel.
pub struct PositionEncoder {
    pub fc1: Linear,
    pub fc2: Linear,
    depth_samples: usize,
}

impl PositionEncoder {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.hidden_dim;
        PositionEncoder {
            fc1: Linear::new(store, "pos.fc1", cfg.depth_samples * 3, d, rng),
            fc2: Linear::new(store, "pos.fc2", d, d, rng),
            depth_samples: cfg.depth_samples,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.depth_samples * 3
    }

    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        s: &'p ParamStore,
        poses: &[CameraPose],
        image_hw: (usize, usize),
        grid_hw: (usize, usize),
    ) -> Result<Vec<Var>> {
        let frustum = unproject_frustum(poses, image_hw, grid_hw, self.depth_samples)?;
        let tokens = grid_hw.0 * grid_hw.1;
        let per_view = tokens * self.input_dim();
        let mut out = Vec::with_capacity(poses.len());
        for v in 0..poses.len() {
            let pts: Vec<f32> = frustum.points[v * per_view..(v + 1) * per_view]
                .iter()
                .map(|x| *x as f32)
                .collect();
            let x = g.input(pts, &[tokens, self.input_dim()]);
            let h = self.fc1.forward(g, s, x);
            let h = g.relu(h);
            out.push(self.fc2.forward(g, s, h));
        }
        Ok(out)
    }
}

/// Elementwise sum per view, then concatenation of views in input order.
pub fn fuse<'p>(g: &mut Graph<'p>, images: &[Var], positions: &[Var]) -> Result<Var> {
    if images.len() != positions.len() || images.is_empty() {
        return Err(Error::Shape(format!(
            "{} image token sets vs {} position token sets",
            images.len(),
            positions.len()
        )));
    }
    let mut sums = Vec::with_capacity(images.len());
    for (&a, &b) in images.iter().zip(positions) {
        if g.shape(a) != g.shape(b) {
            return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
        }
        sums.push(g.add(a, b));
    }
    Ok(g.concat_rows(&sums))
}

/// Collect per-view `[T, d]` nodes into a token grid.
pub fn collect_tokens(g: &Graph<'_>, views: &[Var], grid_hw: (usize, usize)) -> TokenGrid {
    let dim = views.first().map(|&v| g.shape(v)[1]).unwrap_or(0);
    TokenGrid {
        views: views.len(),
        grid_h: grid_hw.0,
        grid_w: grid_hw.1,
        dim,
        features: views.iter().flat_map(|&v| g.value(v).iter().copied()).collect(),
    }
}
