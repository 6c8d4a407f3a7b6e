use rand::Rng;

use crate::autodiff::{scaled_dot_attention, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.uniform(format!("{name}.w"), &[d_in, d_out], d_in, true, rng);
        let b = bias.then(|| store.constant(format!("{name}.b"), &[1, d_out], 0.0));
        Linear { w, b }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Debug, Clone)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: store.constant(format!("{name}.gain"), &[1, d], 1.0),
            bias: store.constant(format!("{name}.bias"), &[1, d], 0.0),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let gain = g.param(self.gain)?;
        let n = g.mul_row(n, gain)?;
        let bias = g.param(self.bias)?;
        g.add_row(n, bias)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.up.apply(g, x)?;
        let h = g.gelu(h)?;
        self.down.apply(g, h)
    }
}

/// Post-norm transformer block: multi-head attention from `x` to `ctx`,
/// residual + norm, feed-forward, residual + norm. Self-attention when
/// `ctx == x`.
#[derive(Debug, Clone)]
pub(crate) struct AttentionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
    heads: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn_hidden: usize, rng: &mut impl Rng) -> Self {
        AttentionBlock {
            q: Linear::new(store, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ffn_hidden, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            heads,
        }
    }

    pub fn attend(&self, g: &mut Graph<'_>, x: Var, ctx: Var) -> Result<Var> {
        let q = self.q.apply(g, x)?;
        let k = self.k.apply(g, ctx)?;
        let v = self.v.apply(g, ctx)?;
        let d = g.shape(q)[1];
        let dh = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, a, b)?, g.slice_cols(k, a, b)?, g.slice_cols(v, a, b)?)
            };
            outs.push(scaled_dot_attention(g, qh, kh, vh, None)?.output);
        }
        let cat = if self.heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.apply(g, cat)
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var, ctx: Var) -> Result<Var> {
        let att = self.attend(g, x, ctx)?;
        let r = g.add(x, att)?;
        let x = self.norm1.apply(g, r)?;
        let f = self.ff.apply(g, x)?;
        let r = g.add(x, f)?;
        self.norm2.apply(g, r)
    }
}

/// Sinusoidal position table, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("table size")
}
