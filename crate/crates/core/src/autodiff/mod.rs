//! Minimal dense-tensor compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] is a single-threaded, define-by-run tape bound to a
//! [`ParamStore`]. Parameters enter the tape through [`Graph::param`];
//! [`Graph::backward`] returns [`Gradients`] that callers accumulate into the
//! store, which lets independent tapes run on separate threads.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry};
pub use gradcheck::{finite_difference_check, max_relative_error_all};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Output of [`scaled_dot_attention`].
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(q k^T / sqrt(d_k) + mask) v`.
///
/// `q` is `Tq x dk`, `k` is `Tk x dk`, `v` is `Tk x dv`. The optional mask is
/// additive (`Tq x Tk`), e.g. `-1e9` for disallowed positions.
pub fn scaled_dot_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
) -> Result<Attention> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?}"),
        ));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    if let Some(mask) = mask {
        if mask.shape() != [qs[0], ks[0]] {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("mask {:?} for scores {}x{}", mask.shape(), qs[0], ks[0]),
            ));
        }
        let m = g.constant(mask.clone())?;
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores)?;
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}
