//! Graph attention over electrodes.
//!
//! Electrodes form a fully connected node set; node i's feature vector is
//! its time course. Each node is updated as
//!
//! ```text
//! n_i' = sum_{j in N_i ∪ {i}} alpha_ij · W n_j
//! alpha_ij = softmax_j( aᵀ · LeakyReLU([W n_i ∥ W n_j]) )
//! ```
//!
//! with slope 0.2 in the LeakyReLU. The attention vector `a` has length
//! 2·d_out and splits into source and destination halves, so the score
//! decomposes as aᵀ·LeakyReLU([h_i ∥ h_j]) = a₁ᵀLReLU(h_i) + a₂ᵀLReLU(h_j);
//! the implementation uses that decomposition, the test oracle evaluates
//! the pairwise definition literally.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const GA_DEFAULT_SLOPE: f64 = 0.2;

/// Shared linear map plus attention weight vector.
#[derive(Debug, Clone)]
pub struct GraphAttentionParams {
    /// (d_out, d_in) shared linear map.
    pub w: Array2<f64>,
    /// Length 2·d_out attention vector [a_src ∥ a_dst].
    pub a: Array1<f64>,
    pub leaky_slope: f64,
}

impl GraphAttentionParams {
    pub fn validate(&self) -> Result<()> {
        let d_out = self.w.shape()[0];
        if self.a.len() != 2 * d_out {
            return Err(Error::shape(
                format!("attention vector of length {}", 2 * d_out),
                format!("{}", self.a.len()),
            ));
        }
        Ok(())
    }
}

/// Store indices for a GA block inside an encoder.
#[derive(Debug, Clone)]
pub struct GaBlock {
    pub w: usize,
    pub a: usize,
    pub slope: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl GaBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{prefix}.w"), &[d_out, d_in], d_in, rng);
        let a = store.add_uniform(format!("{prefix}.a"), &[2 * d_out], 2 * d_out, rng);
        GaBlock { w, a, slope, d_in, d_out }
    }
}

pub struct GaOut {
    /// (B, E, d_out) updated node features.
    pub output: NodeId,
    /// (B, E, E) attention coefficients; rows sum to 1.
    pub alpha: NodeId,
}

/// Batched forward: `x` is (B, E, d_in); `w` (d_out, d_in); `a` (2·d_out).
pub fn graph_attention_node(
    g: &mut Graph,
    x: NodeId,
    w: NodeId,
    a: NodeId,
    slope: f64,
) -> GaOut {
    let shape = g.value(x).shape().to_vec();
    let (bsz, e, d_in) = (shape[0], shape[1], shape[2]);
    let d_out = g.value(w).shape()[0];

    // h = x Wᵀ over all nodes of all trials
    let flat = g.reshape(x, &[bsz * e, d_in]);
    let h = g.linear(flat, w, None);
    let lr = g.leaky_relu(h, slope);

    // split a into source/destination halves with constant selectors
    let a_col = g.reshape(a, &[2 * d_out, 1]);
    let mut s1 = Array2::<f64>::zeros((d_out, 2 * d_out));
    let mut s2 = Array2::<f64>::zeros((d_out, 2 * d_out));
    for i in 0..d_out {
        s1[[i, i]] = 1.0;
        s2[[i, d_out + i]] = 1.0;
    }
    let s1 = g.constant(s1.into_dyn());
    let s2 = g.constant(s2.into_dyn());
    let a_src = g.matmul(s1, a_col); // (d_out, 1)
    let a_dst = g.matmul(s2, a_col);

    // u_i = a_srcᵀ LReLU(h_i), v_j = a_dstᵀ LReLU(h_j)
    let u = g.matmul(lr, a_src); // (B*E, 1)
    let v = g.matmul(lr, a_dst);
    let u3 = g.reshape(u, &[bsz, e, 1]);
    let v3 = g.reshape(v, &[bsz, 1, e]);

    // scores_ij = u_i + v_j via rank-1 broadcasts
    let ones_row = g.constant(ndarray::Array3::<f64>::ones((bsz, 1, e)).into_dyn());
    let ones_col = g.constant(ndarray::Array3::<f64>::ones((bsz, e, 1)).into_dyn());
    let u_full = g.batched_matmul(u3, ones_row); // (B,E,E)
    let v_full = g.batched_matmul(ones_col, v3); // (B,E,E)
    let scores = g.add(u_full, v_full);

    let alpha = g.softmax_last(scores);
    // n_i' aggregates W n_j (not the rectified copy used in the scores)
    let h3 = g.reshape(h, &[bsz, e, d_out]);
    let output = g.batched_matmul(alpha, h3);
    GaOut { output, alpha }
}

/// Single-instance operation on an (E, d_in) node matrix.
pub fn graph_attention(
    nodes: &Array2<f64>,
    params: &GraphAttentionParams,
) -> Result<Array2<f64>> {
    params.validate()?;
    if nodes.shape()[1] != params.w.shape()[1] {
        return Err(Error::shape(
            format!("node feature dim {}", params.w.shape()[1]),
            format!("{}", nodes.shape()[1]),
        ));
    }
    let e = nodes.shape()[0];
    let mut g = Graph::new(false);
    let x = g.constant(
        nodes
            .clone()
            .into_shape_with_order((1, e, nodes.shape()[1]))
            .unwrap()
            .into_dyn(),
    );
    let w = g.constant(params.w.clone().into_dyn());
    let a = g.constant(params.a.clone().into_dyn());
    let out = graph_attention_node(&mut g, x, w, a, params.leaky_slope);
    let d_out = params.w.shape()[0];
    Ok(g
        .value(out.output)
        .view()
        .into_shape_with_order((e, d_out))
        .unwrap()
        .to_owned())
}

/// Attention coefficients for a single instance; rows sum to 1.
pub fn graph_attention_alpha(
    nodes: &Array2<f64>,
    params: &GraphAttentionParams,
) -> Result<Array2<f64>> {
    params.validate()?;
    let e = nodes.shape()[0];
    let mut g = Graph::new(false);
    let x = g.constant(
        nodes
            .clone()
            .into_shape_with_order((1, e, nodes.shape()[1]))
            .unwrap()
            .into_dyn(),
    );
    let w = g.constant(params.w.clone().into_dyn());
    let a = g.constant(params.a.clone().into_dyn());
    let out = graph_attention_node(&mut g, x, w, a, params.leaky_slope);
    Ok(g
        .value(out.alpha)
        .view()
        .into_shape_with_order((e, e))
        .unwrap()
        .to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};

    fn leaky(v: f64, slope: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            slope * v
        }
    }

    /// Literal pairwise evaluation of the update and coefficient formulas,
    /// with the neighborhood N_i ∪ {i} (optionally dropping the self term).
    fn oracle(
        nodes: &Array2<f64>,
        p: &GraphAttentionParams,
        include_self: bool,
    ) -> (Array2<f64>, Array2<f64>) {
        let e = nodes.shape()[0];
        let d_out = p.w.shape()[0];
        let mut h = Array2::<f64>::zeros((e, d_out));
        for i in 0..e {
            for o in 0..d_out {
                let mut acc = 0.0;
                for k in 0..nodes.shape()[1] {
                    acc += p.w[[o, k]] * nodes[[i, k]];
                }
                h[[i, o]] = acc;
            }
        }
        let mut scores = Array2::<f64>::zeros((e, e));
        for i in 0..e {
            for j in 0..e {
                // aᵀ · LeakyReLU([h_i ∥ h_j])
                let mut s = 0.0;
                for o in 0..d_out {
                    s += p.a[o] * leaky(h[[i, o]], p.leaky_slope);
                    s += p.a[d_out + o] * leaky(h[[j, o]], p.leaky_slope);
                }
                scores[[i, j]] = s;
            }
        }
        let mut alpha = Array2::<f64>::zeros((e, e));
        for i in 0..e {
            let js: Vec<usize> = (0..e).filter(|&j| include_self || j != i).collect();
            let m = js
                .iter()
                .map(|&j| scores[[i, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = js.iter().map(|&j| (scores[[i, j]] - m).exp()).sum();
            for &j in &js {
                alpha[[i, j]] = (scores[[i, j]] - m).exp() / denom;
            }
        }
        let mut out = Array2::<f64>::zeros((e, d_out));
        for i in 0..e {
            for j in 0..e {
                for o in 0..d_out {
                    out[[i, o]] += alpha[[i, j]] * h[[j, o]];
                }
            }
        }
        (out, alpha)
    }

    fn random_params(d_in: usize, d_out: usize, seed: u64) -> GraphAttentionParams {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        GraphAttentionParams {
            w: Array2::from_shape_simple_fn((d_out, d_in), || r.gen_range(-1.0..1.0)),
            a: Array1::from_shape_simple_fn(2 * d_out, || r.gen_range(-1.0..1.0)),
            leaky_slope: GA_DEFAULT_SLOPE,
        }
    }

    #[test]
    fn matches_loop_oracle_on_random_instance() {
        let p = random_params(2, 2, 11);
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let nodes = Array2::from_shape_simple_fn((3, 2), || r.gen_range(-1.0..1.0));
        let got = graph_attention(&nodes, &p).unwrap();
        let (want, _) = oracle(&nodes, &p, true);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_nodes_give_uniform_alpha() {
        let p = random_params(4, 4, 13);
        let row = [0.3, -1.2, 0.5, 2.0];
        let nodes = Array2::from_shape_fn((5, 4), |(_, j)| row[j]);
        let alpha = graph_attention_alpha(&nodes, &p).unwrap();
        for v in alpha.iter() {
            assert!((v - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_attention_vector_gives_uniform_alpha() {
        let mut p = random_params(3, 3, 14);
        p.a.fill(0.0);
        let mut r = ChaCha8Rng::seed_from_u64(15);
        let nodes = Array2::from_shape_simple_fn((4, 3), || r.gen_range(-1.0..1.0));
        let alpha = graph_attention_alpha(&nodes, &p).unwrap();
        for v in alpha.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_rows_sum_to_one() {
        for seed in 0..10u64 {
            let p = random_params(6, 5, seed);
            let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
            let nodes = Array2::from_shape_simple_fn((7, 6), || r.gen_range(-3.0..3.0));
            let alpha = graph_attention_alpha(&nodes, &p).unwrap();
            for row in alpha.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_ranges_over_self_inclusive_neighborhood() {
        // Dropping node i from its own neighborhood must change the output.
        let p = random_params(2, 2, 17);
        let mut r = ChaCha8Rng::seed_from_u64(18);
        let nodes = Array2::from_shape_simple_fn((3, 2), || r.gen_range(-1.0..1.0));
        let with_self = graph_attention(&nodes, &p).unwrap();
        let (without_self, _) = oracle(&nodes, &p, false);
        let max_diff = with_self
            .iter()
            .zip(without_self.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "self-exclusion should change the output");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = GraphAttentionParams {
            w: Array2::zeros((3, 2)),
            a: Array1::zeros(5), // should be 6
            leaky_slope: 0.2,
        };
        assert!(graph_attention(&arr2(&[[1.0, 2.0]]), &p).is_err());
    }
}
