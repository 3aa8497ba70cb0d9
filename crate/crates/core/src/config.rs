//! Training configuration.
//!
//! JSON keys mirror the conventional hyperparameter names (`M`, `K`, `d`,
//! `d_th`, `s_max`, `N_enc`, ...), so a config file reads like the usual
//! hyperparameter table. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of anchor queries.
    #[serde(rename = "M")]
    pub num_queries: usize,
    /// Gaussians decoded per query.
    #[serde(rename = "K")]
    pub gaussians_per_query: usize,
    /// Transformer hidden width.
    #[serde(rename = "d")]
    pub hidden_dim: usize,
    #[serde(rename = "H")]
    pub image_height: usize,
    #[serde(rename = "W")]
    pub image_width: usize,
    /// Depth samples per frustum ray.
    #[serde(rename = "d_th")]
    pub depth_samples: usize,
    #[serde(rename = "s_max")]
    pub max_scale: f32,
    #[serde(rename = "N_enc")]
    pub encoder_layers: usize,
    #[serde(rename = "N_dec")]
    pub decoder_layers: usize,
    /// Hinge radius of the mean-offset regularizer.
    #[serde(rename = "delta")]
    pub offset_threshold: f32,
    pub lambda_reg: f32,
    pub lambda_perc: f32,
    pub lambda_inter: f32,
    pub lambda_occ: f32,
    #[serde(rename = "lambda_L2")]
    pub lambda_l2: f32,
    pub n_iter: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,

    pub seed: u64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    /// Per-view input dropout probability.
    pub p_drop: f32,
    pub dataset: Option<PathBuf>,
    /// Views sampled per training example.
    #[serde(rename = "V")]
    pub views: usize,
    /// How many of the sampled views are noised.
    pub noisy_views: usize,
    /// Image-encoder patch size in pixels.
    pub patch: usize,
    pub attention_heads: usize,
    /// Depth of the timestep-conditioned image backbone.
    pub image_layers: usize,
    pub mlp_ratio: usize,
    /// Frequencies of the anchor positional encoding.
    pub n_freq: usize,
    pub use_opacity_loss: bool,
    pub grad_clip: f32,
    pub checkpoint_every: u64,
    pub validate_every: u64,
    /// Prefetched batches in flight.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_queries: 512,
            gaussians_per_query: 10,
            hidden_dim: 512,
            image_height: 128,
            image_width: 128,
            depth_samples: 64,
            max_scale: 0.1,
            encoder_layers: 6,
            decoder_layers: 6,
            offset_threshold: 0.1,
            lambda_reg: 0.05,
            lambda_perc: 0.1,
            lambda_inter: 0.1,
            lambda_occ: 0.1,
            lambda_l2: 1.0,
            n_iter: 300_000,
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.99,
            seed: 0,
            batch_size: 8,
            p_drop: 0.3,
            dataset: None,
            views: 5,
            noisy_views: 3,
            patch: 8,
            attention_heads: 8,
            image_layers: 6,
            mlp_ratio: 4,
            n_freq: 8,
            use_opacity_loss: false,
            grad_clip: 1.0,
            checkpoint_every: 5_000,
            validate_every: 1_000,
            prefetch: 4,
        }
    }
}

impl TrainConfig {
    /// Workstation-scale overrides: 64×64 images, 128 queries, 20k steps,
    /// three views with two noised.
    pub fn desk() -> Self {
        TrainConfig {
            image_height: 64,
            image_width: 64,
            num_queries: 128,
            n_iter: 20_000,
            views: 3,
            noisy_views: 2,
            ..Default::default()
        }
    }

    /// Small enough to train in seconds; used by tests and smoke runs.
    pub fn tiny() -> Self {
        TrainConfig {
            num_queries: 16,
            gaussians_per_query: 4,
            hidden_dim: 32,
            image_height: 32,
            image_width: 32,
            depth_samples: 8,
            encoder_layers: 1,
            decoder_layers: 2,
            image_layers: 1,
            attention_heads: 4,
            mlp_ratio: 2,
            n_freq: 4,
            n_iter: 10,
            lr: 1e-3,
            batch_size: 1,
            views: 3,
            noisy_views: 2,
            checkpoint_every: 0,
            validate_every: 0,
            ..Default::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn tokens_per_view(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn total_gaussians(&self) -> usize {
        self.num_queries * self.gaussians_per_query
    }

    /// Half-width of the mean-offset box around each anchor.
    pub fn offset_bound(&self) -> f32 {
        2.0 * self.offset_threshold
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let counts = [
            ("M", self.num_queries),
            ("K", self.gaussians_per_query),
            ("d", self.hidden_dim),
            ("H", self.image_height),
            ("W", self.image_width),
            ("d_th", self.depth_samples),
            ("N_dec", self.decoder_layers),
            ("batch_size", self.batch_size),
            ("V", self.views),
            ("patch", self.patch),
            ("attention_heads", self.attention_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("n_freq", self.n_freq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        let reals = [
            ("s_max", self.max_scale),
            ("delta", self.offset_threshold),
            ("lr", self.lr),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        let weights = [
            ("lambda_reg", self.lambda_reg),
            ("lambda_perc", self.lambda_perc),
            ("lambda_inter", self.lambda_inter),
            ("lambda_occ", self.lambda_occ),
            ("lambda_L2", self.lambda_l2),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad("p_drop must lie in [0, 1)");
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return bad("attention_heads must divide d");
        }
        if self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return bad("patch must divide H and W");
        }
        if self.noisy_views > self.views {
            return bad("noisy_views cannot exceed V");
        }
        if self.n_freq > 20 {
            return bad("n_freq above 20 overflows f32 frequencies");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_json(&text)
    }

    /// Apply `key=value` overrides using the JSON key names.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, serde_json::Value)>) -> Result<Self> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        for (k, v) in pairs {
            if !obj.contains_key(k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            obj.insert(k.to_string(), v);
        }
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
