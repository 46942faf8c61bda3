//! Multi-head scaled dot-product attention with residual connection and
//! layer normalization. Used as self-attention over electrode tokens and
//! as the cross-branch fusion block.

use ndarray::Ix3;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln_gamma: usize,
    pub ln_beta: usize,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::data(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let w = |store: &mut ParamStore, n: String, rng: &mut ChaCha8Rng| {
            store.add_uniform(n, &[dim, dim], dim, rng)
        };
        Ok(AttentionParams {
            wq: w(store, format!("{prefix}.wq"), rng),
            bq: store.add_zeros(format!("{prefix}.bq"), &[dim], true),
            wk: w(store, format!("{prefix}.wk"), rng),
            bk: store.add_zeros(format!("{prefix}.bk"), &[dim], true),
            wv: w(store, format!("{prefix}.wv"), rng),
            bv: store.add_zeros(format!("{prefix}.bv"), &[dim], true),
            wo: w(store, format!("{prefix}.wo"), rng),
            bo: store.add_zeros(format!("{prefix}.bo"), &[dim], true),
            ln_gamma: store.add_ones(format!("{prefix}.ln_gamma"), &[dim], true),
            ln_beta: store.add_zeros(format!("{prefix}.ln_beta"), &[dim], true),
            heads,
            dim,
        })
    }
}

/// Apply a linear map over the last axis of a (B, S, D) tensor.
fn linear3(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let (bsz, s, d) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, &[bsz * s, d]);
    let y = g.linear(flat, w, Some(b));
    let d_out = g.value(y).shape()[1];
    g.reshape(y, &[bsz, s, d_out])
}

pub struct AttentionOut {
    pub output: NodeId,
    /// Attention weights, shape (B*heads, S_q, S_kv); rows sum to 1.
    pub weights: NodeId,
}

/// queries come from `q_in`, keys/values from `kv_in`; both (B, S, D).
/// Output is layer_norm(q_in + proj(attention)).
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: NodeId,
    kv_in: NodeId,
    p: &AttentionParams,
    bound: &BoundParams,
) -> AttentionOut {
    let q_shape = g
        .value(q_in)
        .view()
        .into_dimensionality::<Ix3>()
        .unwrap()
        .raw_dim();
    let (bsz, sq, d) = (q_shape[0], q_shape[1], q_shape[2]);
    let skv = g.value(kv_in).shape()[1];
    let h = p.heads;
    let dh = d / h;

    let q = linear3(g, q_in, bound.node(p.wq), bound.node(p.bq));
    let k = linear3(g, kv_in, bound.node(p.wk), bound.node(p.bk));
    let v = linear3(g, kv_in, bound.node(p.wv), bound.node(p.bv));

    let split = |g: &mut Graph, x: NodeId, s: usize| -> NodeId {
        let x = g.reshape(x, &[bsz, s, h, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[bsz * h, s, dh])
    };
    let qh = split(g, q, sq);
    let kh = split(g, k, skv);
    let vh = split(g, v, skv);

    let kt = g.permute(kh, &[0, 2, 1]);
    let scores = g.batched_matmul(qh, kt);
    let scores = g.scale_const(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax_last(scores);
    let ctx = g.batched_matmul(weights, vh);

    let merged = g.reshape(ctx, &[bsz, h, sq, dh]);
    let merged = g.permute(merged, &[0, 2, 1, 3]);
    let merged = g.reshape(merged, &[bsz, sq, d]);
    let proj = linear3(g, merged, bound.node(p.wo), bound.node(p.bo));

    let res = g.add(proj, q_in);
    let output = g.layer_norm(res, bound.node(p.ln_gamma), bound.node(p.ln_beta), 1e-5);
    AttentionOut { output, weights }
}
