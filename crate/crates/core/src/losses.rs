//! Contrastive objectives: symmetric InfoNCE, the similarity-keeping
//! regularizer, and their combination.
//!
//! Each loss exists in two forms that share one code path: a graph builder
//! used by the training loop, and a plain-value wrapper that evaluates the
//! same graph on given embeddings. The combined objective is
//!
//! ```text
//! total = (loss_e + loss_i) / 2 + beta * loss_sk
//! ```
//!
//! where `loss_e`/`loss_i` are row/column cross-entropies over the scaled
//! cross-modal similarity logits and `loss_sk` compares the within-batch
//! self-similarity structure of the two modalities. Image embeddings are
//! treated as constants: gradients flow only into the EEG side, tau, and
//! beta.

use ndarray::Array2;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::types::{EmbeddingMatrix, LossParams, LossValue, SimilarityMatrix};

/// Epsilon in every cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;

/// How the similarity-keeping term compares the two self-similarity
/// matrices.
#[derive(Debug, Clone, Copy)]
pub struct SkOptions {
    /// Row-by-row cosine (default) versus flattened whole-matrix cosine.
    pub rowwise: bool,
    /// Keep the unit diagonal in each compared row.
    pub include_diagonal: bool,
}

impl Default for SkOptions {
    fn default() -> Self {
        SkOptions { rowwise: true, include_diagonal: true }
    }
}

impl From<&crate::config::LossConfig> for SkOptions {
    fn from(c: &crate::config::LossConfig) -> Self {
        SkOptions { rowwise: c.sk_rowwise, include_diagonal: c.sk_include_diagonal }
    }
}

pub struct LossNodes {
    pub total: NodeId,
    pub loss_e: NodeId,
    pub loss_i: NodeId,
    pub loss_sk: NodeId,
}

/// Symmetric InfoNCE on a graph: logits = (E_f I_fᵀ) · exp(tau), mean
/// cross-entropy over rows (loss_e) and over columns (loss_i).
pub fn info_nce_node(
    g: &mut Graph,
    e_f: NodeId,
    i_f: NodeId,
    tau: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let i_t = g.permute(i_f, &[1, 0]);
    let raw = g.matmul(e_f, i_t);
    let scale = g.exp(tau);
    let logits = g.scale_by_scalar(raw, scale);
    let loss_e = g.cross_entropy_rows(logits);
    let logits_t = g.permute(logits, &[1, 0]);
    let loss_i = g.cross_entropy_rows(logits_t);
    let sum = g.add(loss_e, loss_i);
    let sym = g.scale_const(sum, 0.5);
    (sym, loss_e, loss_i)
}

/// Similarity-keeping term on a graph:
/// 1 - mean_i cos(row_i(CS(E_f,E_f)), row_i(CS(I_f,I_f))).
pub fn sk_loss_node(g: &mut Graph, e_f: NodeId, i_f: NodeId, opts: &SkOptions) -> NodeId {
    let mut e_cs = g.cosine_sim_matrix(e_f, e_f, COSINE_EPS);
    let mut i_cs = g.cosine_sim_matrix(i_f, i_f, COSINE_EPS);
    let b = g.value(e_cs).shape()[0];
    if !opts.include_diagonal {
        // Zeroed diagonal entries drop out of both the dot product and the
        // row norms, which is exactly row comparison with the diagonal
        // removed.
        let mut mask = Array2::<f64>::ones((b, b));
        for i in 0..b {
            mask[[i, i]] = 0.0;
        }
        let mask = g.constant(mask.into_dyn());
        e_cs = g.mul(e_cs, mask);
        i_cs = g.mul(i_cs, mask);
    }
    let (e_cmp, i_cmp) = if opts.rowwise {
        (e_cs, i_cs)
    } else {
        (g.reshape(e_cs, &[1, b * b]), g.reshape(i_cs, &[1, b * b]))
    };
    let cos = g.cosine_rows_paired(e_cmp, i_cmp, COSINE_EPS);
    let mean = g.mean_all(cos);
    let neg = g.scale_const(mean, -1.0);
    g.add_const(neg, 1.0)
}

/// The combined objective. `beta` may be a trainable leaf or a constant;
/// with beta = 0 the total is bitwise equal to plain InfoNCE.
pub fn sk_infonce_node(
    g: &mut Graph,
    e_f: NodeId,
    i_f: NodeId,
    tau: NodeId,
    beta: NodeId,
    opts: &SkOptions,
) -> LossNodes {
    let (sym, loss_e, loss_i) = info_nce_node(g, e_f, i_f, tau);
    let sk = sk_loss_node(g, e_f, i_f, opts);
    let weighted = g.scale_by_scalar(sk, beta);
    let total = g.add(sym, weighted);
    LossNodes { total, loss_e, loss_i, loss_sk: sk }
}

fn check_pair(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("embedding dim {}", a.dim()),
            format!("{}", b.dim()),
        ));
    }
    Ok(())
}

fn check_batch(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<()> {
    check_pair(a, b)?;
    if a.n_rows() != b.n_rows() {
        return Err(Error::shape(
            format!("batch {}", a.n_rows()),
            format!("{}", b.n_rows()),
        ));
    }
    if a.n_rows() < 2 {
        return Err(Error::data(
            "contrastive loss needs batch size >= 2 (degenerate at B=1)",
        ));
    }
    Ok(())
}

/// Pairwise cosine similarity: entry (i,j) = <A_i,B_j> / (|A_i||B_j| + 1e-12).
pub fn cosine_similarity_matrix(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
) -> Result<SimilarityMatrix> {
    check_pair(a, b)?;
    let mut g = Graph::new(false);
    let an = g.constant(a.values.clone().into_dyn());
    let bn = g.constant(b.values.clone().into_dyn());
    let s = g.cosine_sim_matrix(an, bn, COSINE_EPS);
    let values = g
        .value(s)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    Ok(SimilarityMatrix { values })
}

/// Symmetric InfoNCE value; `tau` is the log-temperature.
pub fn info_nce(e_f: &EmbeddingMatrix, i_f: &EmbeddingMatrix, tau: f64) -> Result<LossValue> {
    check_batch(e_f, i_f)?;
    let mut g = Graph::new(false);
    let e = g.constant(e_f.values.clone().into_dyn());
    let i = g.constant(i_f.values.clone().into_dyn());
    let t = g.scalar_constant(tau);
    let (sym, loss_e, loss_i) = info_nce_node(&mut g, e, i, t);
    Ok(LossValue {
        total: g.scalar(sym),
        loss_e: g.scalar(loss_e),
        loss_i: g.scalar(loss_i),
        loss_sk: 0.0,
        beta: 0.0,
        tau,
    })
}

/// Similarity-keeping value with default options.
pub fn sk_loss(e_f: &EmbeddingMatrix, i_f: &EmbeddingMatrix) -> Result<f64> {
    sk_loss_with(e_f, i_f, &SkOptions::default())
}

pub fn sk_loss_with(
    e_f: &EmbeddingMatrix,
    i_f: &EmbeddingMatrix,
    opts: &SkOptions,
) -> Result<f64> {
    check_batch(e_f, i_f)?;
    let mut g = Graph::new(false);
    let e = g.constant(e_f.values.clone().into_dyn());
    let i = g.constant(i_f.values.clone().into_dyn());
    let sk = sk_loss_node(&mut g, e, i, opts);
    Ok(g.scalar(sk))
}

/// Combined objective value.
pub fn sk_infonce(
    e_f: &EmbeddingMatrix,
    i_f: &EmbeddingMatrix,
    params: &LossParams,
) -> Result<LossValue> {
    sk_infonce_with(e_f, i_f, params, &SkOptions::default())
}

pub fn sk_infonce_with(
    e_f: &EmbeddingMatrix,
    i_f: &EmbeddingMatrix,
    params: &LossParams,
    opts: &SkOptions,
) -> Result<LossValue> {
    check_batch(e_f, i_f)?;
    let mut g = Graph::new(false);
    let e = g.constant(e_f.values.clone().into_dyn());
    let i = g.constant(i_f.values.clone().into_dyn());
    let t = g.scalar_constant(params.tau);
    let b = g.scalar_constant(params.beta);
    let nodes = sk_infonce_node(&mut g, e, i, t, b, opts);
    Ok(LossValue {
        total: g.scalar(nodes.total),
        loss_e: g.scalar(nodes.loss_e),
        loss_i: g.scalar(nodes.loss_i),
        loss_sk: g.scalar(nodes.loss_sk),
        beta: params.beta,
        tau: params.tau,
    })
}
