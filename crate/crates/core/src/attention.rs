//! Scaled dot-product and multi-head attention, attention masks and
//! sinusoidal position encodings.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive logit bias for masked keys. `exp(-1e9 + x - max)` underflows to
/// exactly zero for any realistic logit, so masked keys get zero weight.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Causal,
    Padding,
    CausalPadding,
}

/// Which (query, key) pairs may attend. `key_padding[j] == true` marks key
/// `j` as padding. Causal masks let query `t` see keys `0..=t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    key_padding: Vec<bool>,
}

impl AttentionMask {
    pub fn none() -> Self {
        AttentionMask {
            kind: MaskKind::None,
            key_padding: Vec::new(),
        }
    }

    pub fn causal() -> Self {
        AttentionMask {
            kind: MaskKind::Causal,
            key_padding: Vec::new(),
        }
    }

    pub fn padding(key_padding: Vec<bool>) -> Self {
        AttentionMask {
            kind: MaskKind::Padding,
            key_padding,
        }
    }

    pub fn causal_padding(key_padding: Vec<bool>) -> Self {
        AttentionMask {
            kind: MaskKind::CausalPadding,
            key_padding,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn is_masked(&self, query: usize, key: usize) -> bool {
        let causal = matches!(self.kind, MaskKind::Causal | MaskKind::CausalPadding) && key > query;
        let padded = matches!(self.kind, MaskKind::Padding | MaskKind::CausalPadding)
            && self.key_padding.get(key).copied().unwrap_or(false);
        causal || padded
    }

    /// Additive `[n, m]` logit bias, or `None` when nothing is masked.
    /// A query row with every key masked is a contract error.
    pub fn bias(&self, n: usize, m: usize) -> Result<Option<Tensor>> {
        if matches!(self.kind, MaskKind::Padding | MaskKind::CausalPadding) && self.key_padding.len() != m {
            return Err(Error::Contract(format!(
                "padding mask has {} flags for {m} keys",
                self.key_padding.len()
            )));
        }
        if self.kind == MaskKind::None {
            return Ok(None);
        }
        let mut data = vec![0.0; n * m];
        let mut any = false;
        for i in 0..n {
            let mut open = 0;
            for j in 0..m {
                if self.is_masked(i, j) {
                    data[i * m + j] = MASK_BIAS;
                    any = true;
                } else {
                    open += 1;
                }
            }
            if open == 0 {
                return Err(Error::Contract(format!("query row {i} has every key masked")));
            }
        }
        Ok(any.then(|| Tensor::new(&[n, m], data).expect("sized by construction")))
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k))` with the mask applied; `[n, m]`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, mask: &AttentionMask) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::shape("scaled_dot_attention", &sq, &sk));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (sq[1] as f64).sqrt())?;
    let logits = match mask.bias(sq[0], sk[0])? {
        Some(bias) => {
            let bias = g.constant(bias);
            g.add(logits, bias)?
        }
        None => logits,
    };
    g.softmax(logits)
}

/// `Attn(Q, K, V) = softmax(Q Kᵀ / sqrt(d_k)) V` for `Q: [n, d_k]`,
/// `K: [m, d_k]`, `V: [m, d_v]`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
    if g.shape(k)[0] != g.shape(v).first().copied().unwrap_or(0) {
        return Err(Error::shape("scaled_dot_attention", g.shape(k), g.shape(v)));
    }
    let w = attention_weights(g, q, k, mask)?;
    g.matmul(w, v)
}

/// Multi-head attention. Per-head projections are stored side by side as
/// `d × d` matrices, head `i` owning columns `i·d_h .. (i+1)·d_h`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    heads: usize,
    d_model: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            d_model,
            wq: store.xavier(&format!("{name}.wq"), d_model, d_model),
            wk: store.xavier(&format!("{name}.wk"), d_model, d_model),
            wv: store.xavier(&format!("{name}.wv"), d_model, d_model),
            wo: store.xavier(&format!("{name}.wo"), d_model, d_model),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        query: Var,
        key: Var,
        value: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        for v in [query, key, value] {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != self.d_model {
                return Err(Error::shape("multi_head", s, &[self.d_model]));
            }
        }
        let q = g.matmul(query, b[self.wq])?;
        let k = g.matmul(key, b[self.wk])?;
        let v = g.matmul(value, b[self.wv])?;
        let dh = self.d_model / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qi = g.narrow(q, 1, i * dh, dh)?;
            let ki = g.narrow(k, 1, i * dh, dh)?;
            let vi = g.narrow(v, 1, i * dh, dh)?;
            heads.push(scaled_dot_attention(g, qi, ki, vi, mask)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        g.matmul(joined, b[self.wo])
    }
}

/// Sinusoidal encodings: `PE(t, 2i) = sin(t / 10000^(2i/d))`,
/// `PE(t, 2i+1) = cos(t / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in (0..d).step_by(2) {
            let angle = t as f64 / 10000f64.powf(i as f64 / d as f64);
            data[t * d + i] = angle.sin();
            if i + 1 < d {
                data[t * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(&[len, d], data).expect("sized by construction")
}

/// `x + PE` for a `[T, d]` sequence.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::Contract(format!("positional encoding needs [T, d], got {s:?}")));
    }
    let pe = g.constant(positional_encoding(s[0], s[1]));
    g.add(x, pe)
}
