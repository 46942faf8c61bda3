//! The EEG encoder zoo.
//!
//! Two convolutional cores share one downstream stack (batch norm, ELU,
//! average pooling, dropout):
//!
//! * `TSConv` — temporal convolution first, then a spatial convolution that
//!   collapses the electrode axis.
//! * `STConv` — spatial convolution first, denoising by referencing between
//!   electrodes, then temporal convolution.
//!
//! Optional front-ends operate on the electrode × time plane before the
//! first convolution: multi-head self-attention over electrode tokens (SA)
//! or graph attention with electrodes as nodes (GA). `NervFormer` runs both
//! convolutional cores in parallel and fuses them with cross-branch
//! multi-head attention (spatial branch as queries, temporal branch as
//! keys/values) before concatenating everything.
//!
//! A shared projection head maps flattened features to the joint embedding
//! space and L2-normalizes rows.

pub mod attention;
pub mod graph_attention;

use ndarray::{Array1, Array2, Array3, Array4, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::registry::EncoderKind;
use crate::types::EmbeddingMatrix;

pub use attention::{multi_head_attention, AttentionOut, AttentionParams};
pub use graph_attention::{
    graph_attention, graph_attention_alpha, graph_attention_node, GaBlock, GaOut,
    GraphAttentionParams, GA_DEFAULT_SLOPE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderHyperparams {
    pub n_filters: usize,
    pub temporal_kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub dropout: f64,
    pub ga_leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub attention_heads: usize,
}

impl EncoderHyperparams {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        EncoderHyperparams {
            n_filters: cfg.encoder.n_filters,
            temporal_kernel: cfg.encoder.temporal_kernel,
            pool_kernel: cfg.encoder.pool_kernel,
            pool_stride: cfg.encoder.pool_stride,
            dropout: cfg.encoder.dropout,
            ga_leaky_slope: cfg.encoder.ga_leaky_slope,
            bn_eps: cfg.encoder.bn_eps,
            bn_momentum: cfg.encoder.bn_momentum,
            attention_heads: cfg.attention_heads,
        }
    }
}

/// Flattened feature dimension for a fixed encoder configuration.
pub fn feature_dim(kind: EncoderKind, hp: &EncoderHyperparams, _e: usize, t: usize) -> Result<usize> {
    if t < hp.temporal_kernel {
        return Err(Error::data(format!(
            "n_timepoints {t} shorter than temporal kernel {}",
            hp.temporal_kernel
        )));
    }
    let t_conv = t - hp.temporal_kernel + 1;
    if t_conv < hp.pool_kernel {
        return Err(Error::data(format!(
            "post-conv length {t_conv} shorter than pool kernel {}",
            hp.pool_kernel
        )));
    }
    let t_pool = (t_conv - hp.pool_kernel) / hp.pool_stride + 1;
    let base = hp.n_filters * t_pool;
    Ok(match kind {
        EncoderKind::NervFormer | EncoderKind::NervFormerGA => 3 * base,
        _ => base,
    })
}

#[derive(Debug, Clone)]
struct BnBlock {
    gamma: usize,
    beta: usize,
    rmean: usize,
    rvar: usize,
}

impl BnBlock {
    fn init(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        BnBlock {
            gamma: store.add_ones(format!("{prefix}.bn_gamma"), &[channels], true),
            beta: store.add_zeros(format!("{prefix}.bn_beta"), &[channels], true),
            rmean: store.add_zeros(format!("{prefix}.bn_rmean"), &[channels], false),
            rvar: store.add_ones(format!("{prefix}.bn_rvar"), &[channels], false),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        store: &mut ParamStore,
        x: NodeId,
        hp: &EncoderHyperparams,
    ) -> NodeId {
        if g.training {
            let (y, mean, var) =
                g.batch_norm_train(x, bound.node(self.gamma), bound.node(self.beta), hp.bn_eps);
            let shape = g.value(x).shape().to_vec();
            let n = (shape[0] * shape[2] * shape[3]) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = hp.bn_momentum;
            {
                let rm = store
                    .value_mut(self.rmean)
                    .view_mut()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                ndarray::Zip::from(rm).and(&mean).for_each(|r, &b| {
                    *r = (1.0 - m) * *r + m * b;
                });
            }
            {
                let rv = store
                    .value_mut(self.rvar)
                    .view_mut()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                ndarray::Zip::from(rv).and(&var).for_each(|r, &b| {
                    *r = (1.0 - m) * *r + m * b * unbias;
                });
            }
            y
        } else {
            let gamma = store.value(self.gamma).view().into_dimensionality::<Ix1>().unwrap();
            let beta = store.value(self.beta).view().into_dimensionality::<Ix1>().unwrap();
            let rm = store.value(self.rmean).view().into_dimensionality::<Ix1>().unwrap();
            let rv = store.value(self.rvar).view().into_dimensionality::<Ix1>().unwrap();
            let c = gamma.len();
            let mut scale = Array1::<f64>::zeros(c);
            let mut shift = Array1::<f64>::zeros(c);
            for i in 0..c {
                let inv = 1.0 / (rv[i] + hp.bn_eps).sqrt();
                scale[i] = gamma[i] * inv;
                shift[i] = beta[i] - gamma[i] * rm[i] * inv;
            }
            g.affine_channels(x, scale, shift)
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    w: usize,
    b: usize,
    bn: BnBlock,
}

impl ConvBlock {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        shape: [usize; 4], // (C_out, C_in, KH, KW)
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = shape[1] * shape[2] * shape[3];
        let w = store.add_uniform(format!("{prefix}.w"), &shape, fan_in, rng);
        let b = store.add_zeros(format!("{prefix}.b"), &[shape[0]], true);
        let bn = BnBlock::init(store, prefix, shape[0]);
        ConvBlock { w, b, bn }
    }

    /// conv -> batch norm -> ELU
    fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        store: &mut ParamStore,
        x: NodeId,
        hp: &EncoderHyperparams,
    ) -> NodeId {
        let y = g.conv2d(x, bound.node(self.w), Some(bound.node(self.b)));
        let y = self.bn.forward(g, bound, store, y, hp);
        g.elu(y, 1.0)
    }
}

/// Which convolution comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvOrder {
    TemporalFirst,
    SpatialFirst,
}

#[derive(Debug, Clone)]
struct ConvStack {
    order: ConvOrder,
    conv1: ConvBlock,
    conv2: ConvBlock,
    prefix: String,
}

impl ConvStack {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        order: ConvOrder,
        hp: &EncoderHyperparams,
        e: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let f = hp.n_filters;
        let k = hp.temporal_kernel;
        let (shape1, shape2) = match order {
            ConvOrder::TemporalFirst => ([f, 1, 1, k], [f, f, e, 1]),
            ConvOrder::SpatialFirst => ([f, 1, e, 1], [f, f, 1, k]),
        };
        let (n1, n2) = match order {
            ConvOrder::TemporalFirst => ("temporal_conv", "spatial_conv"),
            ConvOrder::SpatialFirst => ("spatial_conv", "temporal_conv"),
        };
        let p1 = if prefix.is_empty() { n1.to_string() } else { format!("{prefix}.{n1}") };
        let p2 = if prefix.is_empty() { n2.to_string() } else { format!("{prefix}.{n2}") };
        ConvStack {
            order,
            conv1: ConvBlock::init(store, &p1, shape1, rng),
            conv2: ConvBlock::init(store, &p2, shape2, rng),
            prefix: prefix.to_string(),
        }
    }

    fn tap_name(&self, base: &str) -> String {
        if self.prefix.is_empty() {
            base.to_string()
        } else {
            format!("{}.{base}", self.prefix)
        }
    }

    /// Output is (B, F, 1, T_pooled); taps are the post-activation conv maps.
    fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        store: &mut ParamStore,
        x: NodeId,
        hp: &EncoderHyperparams,
        rng: &mut ChaCha8Rng,
        taps: &mut Vec<LayerTap>,
    ) -> NodeId {
        let a1 = self.conv1.forward(g, bound, store, x, hp);
        let a2 = self.conv2.forward(g, bound, store, a1, hp);
        let (n1, n2) = match self.order {
            ConvOrder::TemporalFirst => ("temporal_conv", "spatial_conv"),
            ConvOrder::SpatialFirst => ("spatial_conv", "temporal_conv"),
        };
        taps.push(LayerTap { name: self.tap_name(n1), node: a1 });
        taps.push(LayerTap { name: self.tap_name(n2), node: a2 });
        let pooled = g.avg_pool2d(a2, 1, hp.pool_kernel, 1, hp.pool_stride);
        g.dropout(pooled, hp.dropout, rng)
    }
}

#[derive(Debug, Clone)]
enum FrontEnd {
    Sa(AttentionParams),
    Ga(GaBlock),
}

#[derive(Debug, Clone)]
enum Arch {
    Conv { stack: ConvStack },
    Nerv { st: ConvStack, ts: ConvStack, fuse: AttentionParams },
}

/// A named intermediate activation, kept for attribution.
pub struct LayerTap {
    pub name: String,
    pub node: NodeId,
}

pub struct EncoderForward {
    /// (B, feature_dim) flattened features.
    pub features: NodeId,
    pub taps: Vec<LayerTap>,
    /// Attention coefficient tensors (GA alphas and MHA weights).
    pub attention_weights: Vec<NodeId>,
}

/// Architecture description plus parameter indices. The parameter values
/// themselves live in a `ParamStore` owned by the caller.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub kind: EncoderKind,
    pub hp: EncoderHyperparams,
    pub n_electrodes: usize,
    pub n_timepoints: usize,
    pub embedding_dim: usize,
    front: Option<FrontEnd>,
    arch: Arch,
    proj_w: usize,
    proj_b: usize,
}

impl EncoderModel {
    /// Register all parameters for `kind` into `store` and return the
    /// architecture handle. Registration order is fixed, so two models
    /// built from the same seed have identical parameters.
    pub fn init(
        kind: EncoderKind,
        hp: EncoderHyperparams,
        n_electrodes: usize,
        n_timepoints: usize,
        embedding_dim: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let feat = feature_dim(kind, &hp, n_electrodes, n_timepoints)?;

        let front = match kind {
            EncoderKind::TSConvSA => {
                if n_timepoints % hp.attention_heads != 0 {
                    return Err(Error::data(format!(
                        "self-attention over electrodes needs n_timepoints {} divisible by {} heads",
                        n_timepoints, hp.attention_heads
                    )));
                }
                Some(FrontEnd::Sa(AttentionParams::init(
                    store,
                    "sa",
                    n_timepoints,
                    hp.attention_heads,
                    rng,
                )?))
            }
            k if k.uses_graph_attention() => Some(FrontEnd::Ga(GaBlock::init(
                store,
                "ga",
                n_timepoints,
                n_timepoints,
                hp.ga_leaky_slope,
                rng,
            ))),
            _ => None,
        };

        let arch = match kind {
            EncoderKind::NervFormer | EncoderKind::NervFormerGA => {
                if hp.n_filters % hp.attention_heads != 0 {
                    return Err(Error::data(format!(
                        "cross-branch attention needs n_filters {} divisible by {} heads",
                        hp.n_filters, hp.attention_heads
                    )));
                }
                let st = ConvStack::init(store, "st", ConvOrder::SpatialFirst, &hp, n_electrodes, rng);
                let ts = ConvStack::init(store, "ts", ConvOrder::TemporalFirst, &hp, n_electrodes, rng);
                let fuse = AttentionParams::init(store, "fuse", hp.n_filters, hp.attention_heads, rng)?;
                Arch::Nerv { st, ts, fuse }
            }
            EncoderKind::TSConv | EncoderKind::TSConvSA | EncoderKind::TSConvGA => Arch::Conv {
                stack: ConvStack::init(store, "", ConvOrder::TemporalFirst, &hp, n_electrodes, rng),
            },
            EncoderKind::STConv | EncoderKind::STConvGA => Arch::Conv {
                stack: ConvStack::init(store, "", ConvOrder::SpatialFirst, &hp, n_electrodes, rng),
            },
        };

        let proj_w = store.add_uniform("proj.w", &[embedding_dim, feat], feat, rng);
        let proj_b = store.add_zeros("proj.b", &[embedding_dim], true);

        Ok(EncoderModel {
            kind,
            hp,
            n_electrodes,
            n_timepoints,
            embedding_dim,
            front,
            arch,
            proj_w,
            proj_b,
        })
    }

    pub fn from_config(cfg: &ExperimentConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let entry = crate::registry::resolve_model(&cfg.encoder_name)?;
        EncoderModel::init(
            entry.eeg_encoder,
            EncoderHyperparams::from_config(cfg),
            cfg.n_electrodes,
            cfg.n_timepoints,
            cfg.embedding_dim,
            store,
            rng,
        )
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.kind, &self.hp, self.n_electrodes, self.n_timepoints).unwrap()
    }

    /// Name of the last convolution before flattening, the default
    /// attribution target.
    pub fn default_target_layer(&self) -> &'static str {
        match (&self.arch, self.kind) {
            (Arch::Nerv { .. }, _) => "st.temporal_conv",
            (Arch::Conv { .. }, EncoderKind::STConv | EncoderKind::STConvGA) => "temporal_conv",
            (Arch::Conv { .. }, _) => "spatial_conv",
        }
    }

    pub fn layer_names(&self) -> Vec<&'static str> {
        match &self.arch {
            Arch::Conv { stack } => match stack.order {
                ConvOrder::TemporalFirst => vec!["temporal_conv", "spatial_conv"],
                ConvOrder::SpatialFirst => vec!["spatial_conv", "temporal_conv"],
            },
            Arch::Nerv { .. } => vec![
                "st.spatial_conv",
                "st.temporal_conv",
                "ts.temporal_conv",
                "ts.spatial_conv",
            ],
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.n_electrodes || shape[3] != self.n_timepoints {
            return Err(Error::shape(
                format!("(batch, 1, {}, {})", self.n_electrodes, self.n_timepoints),
                format!("{shape:?}"),
            ));
        }
        Ok(())
    }

    /// Build the forward graph from an already-inserted input node.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        store: &mut ParamStore,
        x: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> EncoderForward {
        let shape = g.value(x).shape().to_vec();
        let (bsz, e, t) = (shape[0], shape[2], shape[3]);
        let mut taps = Vec::new();
        let mut attn = Vec::new();

        let x = match &self.front {
            Some(FrontEnd::Sa(p)) => {
                let seq = g.reshape(x, &[bsz, e, t]);
                let out = multi_head_attention(g, seq, seq, p, bound);
                attn.push(out.weights);
                taps.push(LayerTap { name: "sa".into(), node: out.output });
                g.reshape(out.output, &[bsz, 1, e, t])
            }
            Some(FrontEnd::Ga(blk)) => {
                let seq = g.reshape(x, &[bsz, e, t]);
                let out = graph_attention_node(g, seq, bound.node(blk.w), bound.node(blk.a), blk.slope);
                attn.push(out.alpha);
                taps.push(LayerTap { name: "ga".into(), node: out.output });
                g.reshape(out.output, &[bsz, 1, e, blk.d_out])
            }
            None => x,
        };

        let features = match &self.arch {
            Arch::Conv { stack } => {
                let pooled = stack.forward(g, bound, store, x, &self.hp, rng, &mut taps);
                let pshape = g.value(pooled).shape().to_vec();
                g.reshape(pooled, &[bsz, pshape[1] * pshape[2] * pshape[3]])
            }
            Arch::Nerv { st, ts, fuse } => {
                let st_out = st.forward(g, bound, store, x, &self.hp, rng, &mut taps);
                let ts_out = ts.forward(g, bound, store, x, &self.hp, rng, &mut taps);
                let f = self.hp.n_filters;
                let tp = g.value(st_out).shape()[3];
                // (B,F,1,Tp) -> (B,Tp,F) token sequences
                let st_seq = {
                    let r = g.reshape(st_out, &[bsz, f, tp]);
                    g.permute(r, &[0, 2, 1])
                };
                let ts_seq = {
                    let r = g.reshape(ts_out, &[bsz, f, tp]);
                    g.permute(r, &[0, 2, 1])
                };
                let fused = multi_head_attention(g, st_seq, ts_seq, fuse, bound);
                attn.push(fused.weights);
                taps.push(LayerTap { name: "fuse".into(), node: fused.output });
                let fused_flat = g.reshape(fused.output, &[bsz, tp * f]);
                let st_flat = g.reshape(st_seq, &[bsz, tp * f]);
                let ts_flat = g.reshape(ts_seq, &[bsz, tp * f]);
                g.concat(&[fused_flat, st_flat, ts_flat], 1)
            }
        };

        EncoderForward { features, taps, attention_weights: attn }
    }

    /// Forward plus projection head and row normalization; returns the
    /// (B, d) embedding node.
    pub fn embed(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        store: &mut ParamStore,
        x: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> (NodeId, EncoderForward) {
        let fwd = self.forward(g, bound, store, x, rng);
        let proj = g.linear(fwd.features, bound.node(self.proj_w), Some(bound.node(self.proj_b)));
        let emb = g.l2_normalize_rows(proj, 1e-12);
        (emb, fwd)
    }

    /// Inference-mode feature extraction on plain arrays.
    pub fn forward_features(&self, store: &ParamStore, eeg: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(eeg.shape())?;
        let mut g = Graph::new(false);
        let bound = store.bind(&mut g);
        let x = g.constant(eeg.clone().into_dyn());
        let mut store_copy = store.clone(); // inference never mutates buffers
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut g, &bound, &mut store_copy, x, &mut rng);
        Ok(g.value(fwd.features).view().into_dimensionality::<Ix2>().unwrap().to_owned())
    }

    /// Inference-mode embeddings on plain arrays.
    pub fn embed_batch(&self, store: &ParamStore, eeg: &Array4<f64>) -> Result<EmbeddingMatrix> {
        self.check_input(eeg.shape())?;
        let mut g = Graph::new(false);
        let bound = store.bind(&mut g);
        let x = g.constant(eeg.clone().into_dyn());
        let mut store_copy = store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (emb, _) = self.embed(&mut g, &bound, &mut store_copy, x, &mut rng);
        let values = g.value(emb).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        EmbeddingMatrix::new(values, true)
    }
}

/// Temporal-then-spatial convolutional features, inference mode.
pub fn tsconv_forward(eeg: &Array4<f64>, model: &EncoderModel, store: &ParamStore) -> Result<Array2<f64>> {
    if !matches!(model.kind, EncoderKind::TSConv | EncoderKind::TSConvSA | EncoderKind::TSConvGA) {
        return Err(Error::data(format!("model kind {:?} is not TSConv-family", model.kind)));
    }
    model.forward_features(store, eeg)
}

/// Spatial-then-temporal convolutional features, inference mode.
pub fn stconv_forward(eeg: &Array4<f64>, model: &EncoderModel, store: &ParamStore) -> Result<Array2<f64>> {
    if !matches!(model.kind, EncoderKind::STConv | EncoderKind::STConvGA) {
        return Err(Error::data(format!("model kind {:?} is not STConv-family", model.kind)));
    }
    model.forward_features(store, eeg)
}

/// Dual-branch cross-attention features, inference mode.
pub fn nervformer_forward(eeg: &Array4<f64>, model: &EncoderModel, store: &ParamStore) -> Result<Array2<f64>> {
    if !matches!(model.kind, EncoderKind::NervFormer | EncoderKind::NervFormerGA) {
        return Err(Error::data(format!("model kind {:?} is not NervFormer-family", model.kind)));
    }
    model.forward_features(store, eeg)
}

/// Standalone multi-head self-attention over a (B, S, D) feature tensor.
pub fn self_attention(
    features: &Array3<f64>,
    store: &ParamStore,
    params: &AttentionParams,
) -> Result<Array3<f64>> {
    if features.shape()[2] != params.dim {
        return Err(Error::shape(format!("feature dim {}", params.dim), format!("{}", features.shape()[2])));
    }
    let mut g = Graph::new(false);
    let bound = store.bind(&mut g);
    let x = g.constant(features.clone().into_dyn());
    let out = multi_head_attention(&mut g, x, x, params, &bound);
    Ok(g
        .value(out.output)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned())
}

/// Project features to the joint space and L2-normalize rows
/// (epsilon-guarded; zero rows stay zero).
pub fn project_and_normalize(
    features: &Array2<f64>,
    w: &Array2<f64>,
    b: Option<&Array1<f64>>,
) -> Result<EmbeddingMatrix> {
    if features.shape()[1] != w.shape()[1] {
        return Err(Error::shape(
            format!("projection input dim {}", w.shape()[1]),
            format!("{}", features.shape()[1]),
        ));
    }
    let mut y = features.dot(&w.t());
    if let Some(bias) = b {
        y += bias;
    }
    for mut row in y.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / (n + 1e-12));
    }
    EmbeddingMatrix::new(y, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, s};
    use rand::Rng;

    fn small_hp() -> EncoderHyperparams {
        EncoderHyperparams {
            n_filters: 4,
            temporal_kernel: 5,
            pool_kernel: 2,
            pool_stride: 2,
            dropout: 0.0,
            ga_leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            attention_heads: 2,
        }
    }

    fn build(kind: EncoderKind, e: usize, t: usize, d: usize, seed: u64) -> (EncoderModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EncoderModel::init(kind, small_hp(), e, t, d, &mut store, &mut rng).unwrap();
        (model, store)
    }

    fn random_batch(b: usize, e: usize, t: usize, seed: u64) -> Array4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((b, 1, e, t), || r.gen_range(-1.0..1.0))
    }

    #[test]
    fn shape_contracts() {
        for kind in [
            EncoderKind::TSConv,
            EncoderKind::TSConvSA,
            EncoderKind::TSConvGA,
            EncoderKind::STConv,
            EncoderKind::STConvGA,
            EncoderKind::NervFormer,
            EncoderKind::NervFormerGA,
        ] {
            let (model, store) = build(kind, 8, 16, 6, 1);
            let x = random_batch(2, 8, 16, 2);
            let f = model.forward_features(&store, &x).unwrap();
            assert_eq!(f.shape(), &[2, model.feature_dim()], "{kind:?}");
        }
    }

    #[test]
    fn default_dims_shape_contract() {
        // 64 electrodes, 250 timepoints at the published defaults.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hp = EncoderHyperparams {
            n_filters: 40,
            temporal_kernel: 25,
            pool_kernel: 5,
            pool_stride: 5,
            dropout: 0.5,
            ga_leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            attention_heads: 5,
        };
        let model =
            EncoderModel::init(EncoderKind::TSConv, hp, 64, 250, 32, &mut store, &mut rng).unwrap();
        assert_eq!(model.feature_dim(), 40 * 45);
        let x = random_batch(2, 64, 250, 7);
        let f = tsconv_forward(&x, &model, &store).unwrap();
        assert_eq!(f.shape(), &[2, 1800]);
    }

    #[test]
    fn zeros_in_zeros_out_with_zero_bias() {
        for kind in [EncoderKind::TSConv, EncoderKind::STConv] {
            let (model, store) = build(kind, 6, 12, 4, 3);
            let x = Array4::<f64>::zeros((2, 1, 6, 12));
            let f = model.forward_features(&store, &x).unwrap();
            assert!(f.iter().all(|&v| v == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn nervformer_zero_input_is_batch_uniform() {
        let (model, store) = build(EncoderKind::NervFormer, 6, 12, 4, 4);
        let x = Array4::<f64>::zeros((3, 1, 6, 12));
        let f = model.forward_features(&store, &x).unwrap();
        for b in 1..3 {
            for j in 0..f.shape()[1] {
                assert_eq!(f[[0, j]], f[[b, j]]);
            }
        }
    }

    #[test]
    fn identical_trials_embed_identically_in_inference() {
        for kind in [EncoderKind::TSConv, EncoderKind::STConvGA, EncoderKind::NervFormer] {
            let (model, store) = build(kind, 6, 12, 4, 5);
            let one = random_batch(1, 6, 12, 6);
            let mut two = Array4::<f64>::zeros((2, 1, 6, 12));
            two.slice_mut(s![0, .., .., ..]).assign(&one.slice(s![0, .., .., ..]));
            two.slice_mut(s![1, .., .., ..]).assign(&one.slice(s![0, .., .., ..]));
            let f = model.forward_features(&store, &two).unwrap();
            for j in 0..f.shape()[1] {
                assert_eq!(f[[0, j]].to_bits(), f[[1, j]].to_bits(), "{kind:?}");
            }
        }
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let (model, store) = build(EncoderKind::NervFormerGA, 6, 12, 4, 8);
        let x = random_batch(3, 6, 12, 9);
        let f1 = model.forward_features(&store, &x).unwrap();
        let f2 = model.forward_features(&store, &x).unwrap();
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_names_expected_and_got() {
        let (model, store) = build(EncoderKind::TSConv, 6, 12, 4, 10);
        let x = random_batch(2, 7, 12, 11);
        let err = model.forward_features(&store, &x).unwrap_err().to_string();
        assert!(err.contains("(batch, 1, 6, 12)"), "{err}");
        assert!(err.contains('7'), "{err}");
    }

    #[test]
    fn stconv_spatial_conv_matches_loop_oracle_on_2x8() {
        // Electrode-constant input: the spatial convolution projects every
        // timepoint by the same electrode weighting, so each output map is
        // a scalar multiple of the shared signal. Cross-check the conv
        // arithmetic by explicit loops on a 2-electrode, 8-timepoint input.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut hp = small_hp();
        hp.temporal_kernel = 3;
        let model = EncoderModel::init(EncoderKind::STConv, hp, 2, 8, 4, &mut store, &mut rng).unwrap();
        let _ = model;

        let signal = [0.3, -0.8, 1.1, 0.0, 0.5, -0.2, 0.9, -1.0];
        let mut x = Array4::<f64>::zeros((1, 1, 2, 8));
        for e in 0..2 {
            for t in 0..8 {
                x[[0, 0, e, t]] = signal[t];
            }
        }

        let widx = store.index_of("spatial_conv.w").unwrap();
        let w = store.value(widx).clone();
        let bidx = store.index_of("spatial_conv.b").unwrap();
        let b = store.value(bidx).clone();

        let mut g = Graph::new(false);
        let xn = g.constant(x.clone().into_dyn());
        let wn = g.constant(w.clone());
        let bn = g.constant(b.clone());
        let y = g.conv2d(xn, wn, Some(bn));
        let got = g.value(y).clone();

        // brute-force conv arithmetic
        let w4 = w.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let b1 = b.view().into_dimensionality::<Ix1>().unwrap();
        for f in 0..4 {
            let col_weight: f64 = (0..2).map(|e| w4[[f, 0, e, 0]]).sum();
            for t in 0..8 {
                let expect = col_weight * signal[t] + b1[f];
                let v = got[[0, f, 0, t]];
                assert!((v - expect).abs() < 1e-12, "map {f} t {t}: {v} vs {expect}");
            }
        }
        // rank-1 structure: every map proportional to the signal
        for f in 0..4 {
            let ratio = (got[[0, f, 0, 2]] - b1[f]) / signal[2];
            for t in 0..8 {
                assert!((got[[0, f, 0, t]] - b1[f] - ratio * signal[t]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_check_every_encoder() {
        // d(sum of features)/d(input) against central differences on a
        // small instance, through training-mode batch norm.
        for (kind, seed) in [
            (EncoderKind::TSConv, 30u64),
            (EncoderKind::TSConvSA, 31),
            (EncoderKind::TSConvGA, 32),
            (EncoderKind::STConv, 33),
            (EncoderKind::STConvGA, 34),
            (EncoderKind::NervFormer, 35),
            (EncoderKind::NervFormerGA, 36),
        ] {
            let (model, mut store) = build(kind, 4, 16, 4, seed);
            let x0 = random_batch(2, 4, 16, seed + 100);
            let mut r = ChaCha8Rng::seed_from_u64(seed + 200);
            let dir = Array4::from_shape_simple_fn((2, 1, 4, 16), || r.gen_range(-1.0..1.0));

            let eval = |arr: &Array4<f64>, store: &ParamStore| -> f64 {
                let mut g = Graph::new(true);
                let bound = store.bind(&mut g);
                let x = g.constant(arr.clone().into_dyn());
                let mut sc = store.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let fwd = model.forward(&mut g, &bound, &mut sc, x, &mut rng);
                let s = g.sum_all(fwd.features);
                g.scalar(s)
            };

            let mut g = Graph::new(true);
            let bound = store.bind(&mut g);
            let x = g.leaf(x0.clone().into_dyn());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fwd = {
                let sc = &mut store;
                let mut sc2 = sc.clone();
                let f = model.forward(&mut g, &bound, &mut sc2, x, &mut rng);
                f
            };
            let s = g.sum_all(fwd.features);
            g.backward(s);
            let analytic = (g.grad(x).unwrap() * &dir.clone().into_dyn()).sum();

            let eps = 1e-6;
            let xp = &x0 + &dir.mapv(|v| v * eps);
            let xm = &x0 - &dir.mapv(|v| v * eps);
            let numeric = (eval(&xp, &store) - eval(&xm, &store)) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-5, "{kind:?}: analytic {analytic} numeric {numeric} rel {rel}");
        }
    }

    #[test]
    fn project_and_normalize_345() {
        let f = arr2(&[[3.0, 4.0]]);
        let w = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let m = project_and_normalize(&f, &w, None).unwrap();
        assert!((m.values[[0, 0]] - 0.6).abs() < 1e-9);
        assert!((m.values[[0, 1]] - 0.8).abs() < 1e-9);
        assert!(m.normalized);
    }

    #[test]
    fn project_and_normalize_zero_row_stays_zero() {
        let f = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        let w = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let m = project_and_normalize(&f, &w, None).unwrap();
        assert_eq!(m.values[[0, 0]], 0.0);
        assert_eq!(m.values[[0, 1]], 0.0);
        assert!(m.normalized);
        let n1 = (m.values[[1, 0]].powi(2) + m.values[[1, 1]].powi(2)).sqrt();
        assert!((n1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn project_rows_are_unit_norm() {
        let mut r = ChaCha8Rng::seed_from_u64(50);
        let f = Array2::from_shape_simple_fn((5, 7), || r.gen_range(-2.0..2.0));
        let w = Array2::from_shape_simple_fn((3, 7), || r.gen_range(-1.0..1.0));
        let b = arr1(&[0.1, -0.2, 0.3]);
        let m = project_and_normalize(&f, &w, Some(&b)).unwrap();
        for row in m.values.rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-6 || n == 0.0);
        }
    }

    #[test]
    fn embeddings_are_normalized() {
        let (model, store) = build(EncoderKind::STConv, 6, 12, 5, 60);
        let x = random_batch(3, 6, 12, 61);
        let emb = model.embed_batch(&store, &x).unwrap();
        assert_eq!(emb.values.shape(), &[3, 5]);
        assert!(emb.normalized);
    }

    #[test]
    fn kind_mismatch_in_free_functions() {
        let (model, store) = build(EncoderKind::STConv, 6, 12, 4, 70);
        let x = random_batch(1, 6, 12, 71);
        assert!(tsconv_forward(&x, &model, &store).is_err());
        assert!(stconv_forward(&x, &model, &store).is_ok());
        assert!(nervformer_forward(&x, &model, &store).is_err());
    }
}
