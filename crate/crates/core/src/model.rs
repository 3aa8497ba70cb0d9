//! The full network: image backbone, frustum position encoder, anchor
//! queries and the expansion network.

use std::sync::atomic::{AtomicUsize, Ordering};

use autodiff::{Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::encoder::{fuse, ImageEncoder, PositionEncoder};
use crate::error::{Error, Result};
use crate::expansion::{to_gaussian_set, ExpansionNet, QueryBank};
use crate::gaussians::GaussianSet;
use crate::geometry::CameraPose;
use crate::image::Image;

/// Parameter groups, by name prefix.
pub const PARAM_GROUPS: [&str; 4] = ["image", "pos", "queries", "expand"];

pub struct Model {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub position: PositionEncoder,
    pub bank: QueryBank,
    pub net: ExpansionNet,
    forwards: AtomicUsize,
}

/// Tape nodes produced by one forward pass.
pub struct Forward {
    /// Anchor positions `[M, 3]`.
    pub refs: Var,
    /// Decoded `[M·K, 14]` parameters per decoder layer, last is final.
    /// Only the final layer is decoded when intermediate layers were not
    /// requested.
    pub layers: Vec<Var>,
}

impl Forward {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least one decoder layer")
    }
}

impl Model {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, cfg, &mut rng);
        let position = PositionEncoder::new(&mut store, cfg, &mut rng);
        let bank = QueryBank::new(&mut store, cfg, &mut rng);
        let net = ExpansionNet::new(&mut store, cfg, &mut rng);
        Ok(Model {
            cfg: cfg.clone(),
            store,
            image,
            position,
            bank,
            net,
            forwards: AtomicUsize::new(0),
        })
    }

    /// Number of forward passes run so far.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn group_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    /// Encode the given views and decode Gaussians. `all_layers` also
    /// decodes every intermediate decoder layer.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        images: &[&Image],
        t: &[f32],
        poses: &[CameraPose],
        all_layers: bool,
    ) -> Result<Forward> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        if images.is_empty() {
            return Err(Error::TooFewViews { have: 0, need: 1 });
        }
        if images.len() != poses.len() {
            return Err(Error::Shape(format!("{} images but {} poses", images.len(), poses.len())));
        }
        let s = &self.store;
        let cfg = &self.cfg;
        let img_tokens = self.image.forward(g, s, images, t)?;
        let pos_tokens = self.position.forward(
            g,
            s,
            poses,
            (cfg.image_height, cfg.image_width),
            cfg.grid(),
        )?;
        let tokens = fuse(g, &img_tokens, &pos_tokens)?;
        let (refs, queries) = self.bank.embed(g, s);
        let states = self.net.expand(g, s, queries, tokens)?;
        let last = states.len() - 1;
        let layers = states
            .iter()
            .enumerate()
            .filter(|(l, _)| all_layers || *l == last)
            .map(|(l, &st)| self.net.decode(g, s, l, st, refs, cfg))
            .collect();
        Ok(Forward { refs, layers })
    }

    /// Forward pass without the tape, returning the final decoded set.
    pub fn predict(&self, images: &[&Image], t: &[f32], poses: &[CameraPose]) -> Result<GaussianSet> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, t, poses, false)?;
        Ok(to_gaussian_set(g.value(out.last()), self.cfg.gaussians_per_query))
    }

    pub fn refs(&self) -> &[f32] {
        self.bank.refs(&self.store)
    }
}
