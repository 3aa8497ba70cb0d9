//! Anchor queries and the query-to-Gaussian expansion network.

use autodiff::{Graph, Init, ParamId, ParamStore, Var};
use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussians::{Gaussian3D, GaussianSet, FLOATS_PER_GAUSSIAN};
use crate::nn::{DecoderLayer, EncoderBlock, LayerNorm, Linear};

/// Initial decoded scale before the exponential.
const INIT_SCALE: f32 = 0.03;
const INIT_OPACITY: f32 = 0.1;

/// Learnable anchor points and the network embedding them as queries.
pub struct QueryBank {
    pub refs: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
    pub n_freq: usize,
    num_queries: usize,
}

impl QueryBank {
    /// Anchors start uniform in `[-1, 1]³`.
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.hidden_dim;
        QueryBank {
            refs: store.add("queries.refs", &[cfg.num_queries, 3], Init::Uniform(-1.0, 1.0), rng),
            fc1: Linear::new(store, "queries.fc1", 6 * cfg.n_freq, d, rng),
            fc2: Linear::new(store, "queries.fc2", d, d, rng),
            n_freq: cfg.n_freq,
            num_queries: cfg.num_queries,
        }
    }

    pub fn len(&self) -> usize {
        self.num_queries
    }

    pub fn is_empty(&self) -> bool {
        self.num_queries == 0
    }

    pub fn refs<'a>(&self, store: &'a ParamStore) -> &'a [f32] {
        store.data(self.refs)
    }

    /// `Q = FC(ReLU(FC(PE(r))))`, shape `[M, d]`.
    pub fn embed<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore) -> (Var, Var) {
        let refs = g.param(s, self.refs);
        let pe = g.sinusoidal_pe(refs, self.n_freq);
        let h = self.fc1.forward(g, s, pe);
        let h = g.relu(h);
        (refs, self.fc2.forward(g, s, h))
    }
}

/// `FC–ReLU–FC–ReLU–FC`, activation applied by the caller.
pub struct HeadMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl HeadMlp {
    fn new(store: &mut ParamStore, name: &str, d: usize, out: usize, bias: Init, rng: &mut impl Rng) -> Self {
        let hidden = (d / 2).max(1);
        HeadMlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, rng),
            fc3: Linear::with_init(store, &format!("{name}.fc3"), hidden, out, Init::XavierUniform, bias, rng),
        }
    }

    fn forward<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, s, x);
        let h = g.relu(h);
        let h = self.fc2.forward(g, s, h);
        let h = g.relu(h);
        self.fc3.forward(g, s, h)
    }
}

/// Decodes one query state into `K` Gaussians.
pub struct GaussianHead {
    pub norm: LayerNorm,
    pub mu: HeadMlp,
    /// Scale (3) and rotation (4) per Gaussian.
    pub sigma: HeadMlp,
    pub color: HeadMlp,
    pub opacity: HeadMlp,
    k: usize,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mut sigma_bias = Vec::with_capacity(7 * k);
        for _ in 0..k {
            sigma_bias.extend([INIT_SCALE.ln(); 3]);
            sigma_bias.extend([1.0, 0.0, 0.0, 0.0]);
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d, rng);
        let mu = HeadMlp::new(store, &format!("{name}.mu"), d, 3 * k, Init::Zeros, rng);
        let sigma = HeadMlp::new(store, &format!("{name}.sigma"), d, 7 * k, Init::Zeros, rng);
        store.data_mut(sigma.fc3.b).copy_from_slice(&sigma_bias);
        let opacity = HeadMlp::new(store, &format!("{name}.opacity"), d, k, Init::Zeros, rng);
        let logit = (INIT_OPACITY / (1.0 - INIT_OPACITY)).ln();
        store.data_mut(opacity.fc3.b).fill(logit);
        GaussianHead {
            norm,
            mu,
            sigma,
            color: HeadMlp::new(store, &format!("{name}.color"), d, 3 * k, Init::Zeros, rng),
            opacity,
            k,
        }
    }

    /// `state: [M, d]`, `refs: [M, 3]` → `[M·K, 14]` in file field order.
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        s: &'p ParamStore,
        state: Var,
        refs: Var,
        offset_bound: f32,
        max_scale: f32,
    ) -> Var {
        let m = g.shape(state)[0];
        let n = m * self.k;
        let x = self.norm.forward(g, s, state);

        let raw = self.mu.forward(g, s, x);
        let raw = g.reshape(raw, &[n, 3]);
        let sg = g.sigmoid(raw);
        let offset = g.scale(sg, 2.0 * offset_bound);
        let offset = g.add_scalar(offset, -offset_bound);
        let anchors = g.repeat_rows(refs, self.k);
        let mu = g.add(anchors, offset);

        let raw = self.sigma.forward(g, s, x);
        let raw = g.reshape(raw, &[n, 7]);
        let log_scale = g.slice_cols(raw, 0, 3);
        let scale = g.exp(log_scale);
        let scale = g.clamp_max(scale, max_scale);
        let rot = g.slice_cols(raw, 3, 4);
        let rot = g.normalize_rows(rot);

        let raw = self.color.forward(g, s, x);
        let raw = g.reshape(raw, &[n, 3]);
        let color = g.sigmoid(raw);

        let raw = self.opacity.forward(g, s, x);
        let raw = g.reshape(raw, &[n, 1]);
        let opacity = g.sigmoid(raw);

        g.concat_cols(&[mu, scale, rot, color, opacity])
    }

    /// Zero the final mean layer so every decoded mean sits on its anchor.
    pub fn zero_offsets(&self, store: &mut ParamStore) {
        store.data_mut(self.mu.fc3.w).fill(0.0);
        store.data_mut(self.mu.fc3.b).fill(0.0);
    }
}

/// Token encoder, query decoder and one Gaussian head per decoder layer.
pub struct ExpansionNet {
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderLayer>,
    pub heads: Vec<GaussianHead>,
    pub k: usize,
}

impl ExpansionNet {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.hidden_dim;
        let (h, r) = (cfg.attention_heads, cfg.mlp_ratio);
        ExpansionNet {
            encoder: (0..cfg.encoder_layers)
                .map(|i| EncoderBlock::new(store, &format!("expand.enc{i}"), d, h, r, rng))
                .collect(),
            decoder: (0..cfg.decoder_layers)
                .map(|i| DecoderLayer::new(store, &format!("expand.dec{i}"), d, h, r, rng))
                .collect(),
            heads: (0..cfg.decoder_layers)
                .map(|i| GaussianHead::new(store, &format!("expand.head{i}"), d, cfg.gaussians_per_query, rng))
                .collect(),
            k: cfg.gaussians_per_query,
        }
    }

    /// Refine the tokens, then run the decoder, keeping every layer's
    /// query state.
    pub fn expand<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, queries: Var, tokens: Var) -> Result<Vec<Var>> {
        if g.shape(queries)[1] != g.shape(tokens)[1] {
            return Err(Error::Shape(format!(
                "queries {:?} vs tokens {:?}",
                g.shape(queries),
                g.shape(tokens)
            )));
        }
        let mut memory = tokens;
        for block in &self.encoder {
            memory = block.forward(g, s, memory);
        }
        let mut q = queries;
        let mut states = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            q = layer.forward(g, s, q, memory);
            states.push(q);
        }
        Ok(states)
    }

    /// Decode layer `layer`'s state into `[M·K, 14]` parameters.
    pub fn decode<'p>(
        &self,
        g: &mut Graph<'p>,
        s: &'p ParamStore,
        layer: usize,
        state: Var,
        refs: Var,
        cfg: &TrainConfig,
    ) -> Var {
        self.heads[layer].forward(g, s, state, refs, cfg.offset_bound(), cfg.max_scale)
    }

    pub fn zero_offsets(&self, store: &mut ParamStore) {
        for head in &self.heads {
            head.zero_offsets(store);
        }
    }
}

/// Convert decoded `[M·K, 14]` values into a set with provenance.
pub fn to_gaussian_set(values: &[f32], k: usize) -> GaussianSet {
    let gaussians: Vec<Gaussian3D> = values.chunks(FLOATS_PER_GAUSSIAN).map(Gaussian3D::from_slice).collect();
    let provenance = (0..gaussians.len()).map(|i| (i / k) as u32).collect();
    GaussianSet::with_provenance(gaussians, provenance)
}
