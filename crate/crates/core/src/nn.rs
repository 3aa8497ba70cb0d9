//! Transformer building blocks over the autodiff tape.

use autodiff::{Graph, Init, ParamId, ParamStore, Var};
use rand::Rng;

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        Linear::with_init(store, name, fin, fout, Init::XavierUniform, Init::Zeros, rng)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        fin: usize,
        fout: usize,
        w_init: Init,
        b_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), &[fin, fout], w_init, rng),
            b: store.add(format!("{name}.b"), &[fout], b_init, rng),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, x: Var) -> Var {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Layer norm with learned gain and bias.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), &[dim], Init::Const(1.0), rng),
            beta: store.add(format!("{name}.beta"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Two-layer GELU MLP.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, s, x);
        let h = g.gelu(h);
        self.fc2.forward(g, s, h)
    }
}

/// Multi-head attention with separate query and key/value projections, so
/// the same module serves self- and cross-attention.
pub struct Attention {
    pub q: Linear,
    pub kv: Linear,
    pub out: Linear,
    pub heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            kv: Linear::new(store, &format!("{name}.kv"), dim, 2 * dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, x: Var, context: Var) -> Var {
        let q = self.q.forward(g, s, x);
        let kv = self.kv.forward(g, s, context);
        let k = g.slice_cols(kv, 0, self.dim);
        let v = g.slice_cols(kv, self.dim, self.dim);
        let a = g.attention(q, k, v, self.heads);
        self.out.forward(g, s, a)
    }
}

/// Pre-norm self-attention block.
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, rng),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, x: Var) -> Var {
        let h = self.norm1.forward(g, s, x);
        let a = self.attn.forward(g, s, h, h);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, s, x);
        let m = self.mlp.forward(g, s, h);
        g.add(x, m)
    }
}

/// Pre-norm block whose norms are modulated by a conditioning vector
/// (adaptive layer norm with gated residuals).
pub struct AdaLnBlock {
    pub modulation: Linear,
    pub attn: Attention,
    pub mlp: Mlp,
    dim: usize,
}

impl AdaLnBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        AdaLnBlock {
            // small, not zero: the block must respond to the timestep from step 0
            modulation: Linear::with_init(
                store,
                &format!("{name}.modulation"),
                dim,
                6 * dim,
                Init::Normal(0.02),
                Init::Zeros,
                rng,
            ),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
            dim,
        }
    }

    fn modulate<'p>(g: &mut Graph<'p>, x: Var, shift: Var, scale: Var) -> Var {
        let n = g.layer_norm(x);
        let s1 = g.add_scalar(scale, 1.0);
        let y = g.mul_row(n, s1);
        g.add_row(y, shift)
    }

    /// `x: [T, d]` tokens of one view, `cond: [1, d]` its conditioning.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, x: Var, cond: Var) -> Var {
        let c = g.silu(cond);
        let m = self.modulation.forward(g, s, c);
        let d = self.dim;
        let chunk: Vec<Var> = (0..6).map(|i| g.slice_cols(m, i * d, d)).collect();
        let (shift1, scale1, gate1, shift2, scale2, gate2) =
            (chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5]);
        let h = Self::modulate(g, x, shift1, scale1);
        let a = self.attn.forward(g, s, h, h);
        let a = g.mul_row(a, gate1);
        let x = g.add(x, a);
        let h = Self::modulate(g, x, shift2, scale2);
        let f = self.mlp.forward(g, s, h);
        let f = g.mul_row(f, gate2);
        g.add(x, f)
    }
}

/// Query self-attention, cross-attention into a token memory, then MLP.
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub norm_memory: LayerNorm,
    pub cross_attn: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        DecoderLayer {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim, rng),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim, rng),
            norm_memory: LayerNorm::new(store, &format!("{name}.norm_memory"), dim, rng),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), dim, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, s: &'p ParamStore, q: Var, memory: Var) -> Var {
        let h = self.norm_self.forward(g, s, q);
        let a = self.self_attn.forward(g, s, h, h);
        let q = g.add(q, a);
        let h = self.norm_cross.forward(g, s, q);
        let m = self.norm_memory.forward(g, s, memory);
        let c = self.cross_attn.forward(g, s, h, m);
        let q = g.add(q, c);
        let h = self.norm_mlp.forward(g, s, q);
        let f = self.mlp.forward(g, s, h);
        g.add(q, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blocks_preserve_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = EncoderBlock::new(&mut store, "enc", 16, 4, 2, &mut rng);
        let ada = AdaLnBlock::new(&mut store, "ada", 16, 4, 2, &mut rng);
        let dec = DecoderLayer::new(&mut store, "dec", 16, 4, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.input((0..80).map(|v| (v as f32).sin()).collect(), &[5, 16]);
        let c = g.input(vec![0.1; 16], &[1, 16]);
        let q = g.input(vec![0.2; 48], &[3, 16]);
        let y = enc.forward(&mut g, &store, x);
        assert_eq!(g.shape(y), &[5, 16]);
        let y = ada.forward(&mut g, &store, y, c);
        assert_eq!(g.shape(y), &[5, 16]);
        let z = dec.forward(&mut g, &store, q, y);
        assert_eq!(g.shape(z), &[3, 16]);
        assert!(g.value(z).iter().all(|v| v.is_finite()));
    }
}
