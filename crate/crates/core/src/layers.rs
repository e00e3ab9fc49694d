//! Layer norm, linear and feed-forward layers, the residual sublayer wrapper
//! and a plain self-attention encoder layer.

use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionMask, MultiHeadAttention};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Train/eval switch plus the dropout stream for one forward pass.
pub struct Ctx {
    training: bool,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            training: false,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        Ctx {
            training: true,
            dropout,
            rng: Some(rng),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.training => g.dropout(x, self.dropout, true, rng),
            _ => Ok(x),
        }
    }

    /// Hands back the dropout stream so it can continue into the next step.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.rng
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.ones(&format!("{name}.gain"), &[d]),
            bias: store.zeros(&format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, b[self.gain], b[self.bias], LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: store.xavier(&format!("{name}.w"), d_in, d_out),
            bias: store.zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, b[self.weight])?;
        g.add(y, b[self.bias])
    }
}

/// `o = max(0, m W1 + b1) W2 + b2`
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.1"), d, d_ff),
            outer: Linear::new(store, &format!("{name}.2"), d_ff, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, b, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, b, h)
    }
}

/// Post-norm residual wrapper: `layer_norm(x + dropout(f(x)))`.
pub fn sublayer<F>(g: &mut Graph, b: &Bound, norm: &LayerNorm, ctx: &mut Ctx, x: Var, f: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let y = f(g, x)?;
    if g.shape(y) != g.shape(x) {
        return Err(Error::Contract(format!(
            "sublayer changed shape {:?} -> {:?}",
            g.shape(x),
            g.shape(y)
        )));
    }
    let y = ctx.dropout(g, y)?;
    let s = g.add(x, y)?;
    norm.forward(g, b, s)
}

/// Self-attention sublayer followed by a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, ctx: &mut Ctx, x: Var, mask: &AttentionMask) -> Result<Var> {
        let h = sublayer(g, b, &self.attn_norm, ctx, x, |g, x| self.attn.forward(g, b, x, x, x, mask))?;
        sublayer(g, b, &self.ffn_norm, ctx, h, |g, x| self.ffn.forward(g, b, x))
    }
}
