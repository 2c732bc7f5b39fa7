//! Transformer building blocks over the autodiff graph.

use rand::Rng;

use crate::error::Result;
use crate::graph::{AttentionBias, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = store.xavier(format!("{name}.w"), din, dout, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]), false);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.w).data_mut().fill(0.0);
        store.value_mut(self.b).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), false),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, shift) = (g.param(self.gain), g.param(self.shift));
        g.layer_norm(x, gain, shift, LN_EPS)
    }
}

/// Two affine layers with a GELU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, hidden: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dout, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Queries live in `dim`; keys/values are projected from `context_dim`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            dim.is_multiple_of(heads),
            "{name}: dim {dim} not divisible by {heads} heads"
        );
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), context_dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), context_dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node (for weights).
    pub fn forward(
        &self,
        g: &mut Graph,
        xq: Var,
        xkv: Var,
        groups: usize,
        bias: Option<AttentionBias>,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let a = g.attention(q, k, v, self.heads, groups, bias)?;
        Ok((self.out.forward(g, a)?, a))
    }
}

/// Pre-norm transformer block. With `attend == false` the attention
/// sublayer is skipped so tokens never interact.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub attend: bool,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, rng),
            attend: true,
        }
    }

    /// `x` is `[groups * n, dim]`; attention runs within each group.
    pub fn forward(&self, g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
        let x = if self.attend {
            let h = self.ln1.forward(g, x)?;
            let (a, _) = self.attn.forward(g, h, h, groups, None)?;
            g.add(x, a)?
        } else {
            x
        };
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

pub fn run_blocks(g: &mut Graph, blocks: &[TransformerBlock], mut x: Var, groups: usize) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, x, groups)?;
    }
    Ok(x)
}
