//! Reverse-mode automatic differentiation on f64 tensors.
//!
//! A `Graph` is a define-by-run tape: every operation evaluates eagerly and
//! records what it needs for the backward pass. Nodes are topologically
//! ordered by construction, so backpropagation is a single reverse sweep.
//! Everything runs single-threaded on `ndarray` storage, which makes forward
//! and backward passes bitwise reproducible for a fixed graph construction
//! order.
//!
//! The op set is exactly what the encoders, losses and attribution code
//! need; fused ops (conv, batch norm, cross-entropy, cosine similarity,
//! row normalization) keep the tape short and the backward formulas exact.

use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Arr = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Arr,
    grad: Option<Arr>,
    op: Op,
}

enum Op {
    Leaf { requires_grad: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    ScaleByScalar { x: NodeId, s: NodeId },
    Exp(NodeId),
    MatMul(NodeId, NodeId),
    BatchedMatMul(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, cache: ConvCache },
    AvgPool2d { x: NodeId, kh: usize, kw: usize, sh: usize, sw: usize },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache },
    AffineChannels { x: NodeId, scale: Array1<f64> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: LnCache },
    Elu { x: NodeId, alpha: f64 },
    LeakyRelu { x: NodeId, slope: f64 },
    Dropout { x: NodeId, mask: Arr },
    SoftmaxLast { x: NodeId },
    Reshape { x: NodeId, from: Vec<usize> },
    Permute { x: NodeId, axes: Vec<usize> },
    Concat { xs: Vec<NodeId>, axis: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    L2NormalizeRows { x: NodeId, eps: f64 },
    CosineSimMatrix { a: NodeId, b: NodeId, eps: f64 },
    CosineRowsPaired { a: NodeId, b: NodeId, eps: f64 },
    CrossEntropyRows { logits: NodeId, softmax: Array2<f64> },
}

struct ConvCache {
    col: Array2<f64>, // (B*OH*OW, Cin*KH*KW)
    out_hw: (usize, usize),
}

struct BnCache {
    x_hat: Arr,
    inv_std: Array1<f64>,
}

struct LnCache {
    x_hat: Arr,
    inv_std: Arr, // shape = input with last axis dropped, stored flat
}

pub struct Graph {
    nodes: Vec<Node>,
    pub training: bool,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph { nodes: Vec::new(), training }
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Arr> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: Arr, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input: participates in forward only.
    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| t * c);
        self.push(v, Op::ScaleConst(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| t + c);
        self.push(v, Op::AddConst(x))
    }

    /// Multiply a tensor elementwise by a scalar node.
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_value(s);
        let v = self.nodes[x.0].value.mapv(|t| t * sv);
        self.push(v, Op::ScaleByScalar { x, s })
    }

    fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.iter().next().copied().unwrap()
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(x))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    /// Batched matrix product over matching leading dimension: (N,a,k)x(N,k,b).
    pub fn batched_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (n, rows, _k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let cols = bv.shape()[2];
        let mut out = ndarray::Array3::<f64>::zeros((n, rows, cols));
        for i in 0..n {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(out.into_dyn(), Op::BatchedMatMul(a, b))
    }

    /// y = x · wᵀ + b with x:(n,in), w:(out,in), b:(out).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let wv = as2(&self.nodes[w.0].value);
        let mut y = xv.dot(&wv.t());
        if let Some(bid) = b {
            let bv = self.nodes[bid.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            y += &bv;
        }
        self.push(y.into_dyn(), Op::Linear { x, w, b })
    }

    /// Valid-padding stride-1 2-D convolution, NCHW layout.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, cin, h, wdt) = dims4(xv.shape());
        let (cout, cin_w, kh, kw) = dims4(wv.shape());
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert!(h >= kh && wdt >= kw, "conv2d kernel larger than input");
        let oh = h - kh + 1;
        let ow = wdt - kw + 1;

        let col = im2col(&xv.to_owned(), kh, kw, oh, ow);
        let w_mat = wv.to_owned().into_shape_with_order((cout, cin * kh * kw)).unwrap();
        // (B*OH*OW, K) x (K, Cout) -> (B*OH*OW, Cout)
        let mut y_mat = col.dot(&w_mat.t());
        if let Some(bid) = b {
            let bv = self.nodes[bid.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            y_mat += &bv;
        }
        let y = y_mat
            .into_shape_with_order((bsz, oh, ow, cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(
            y,
            Op::Conv2d { x, w, b, cache: ConvCache { col, out_hw: (oh, ow) } },
        )
    }

    /// Valid-padding average pooling, NCHW layout.
    pub fn avg_pool2d(&mut self, x: NodeId, kh: usize, kw: usize, sh: usize, sw: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = dims4(xv.shape());
        assert!(h >= kh && w >= kw, "pool window larger than input");
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let inv = 1.0 / (kh * kw) as f64;
        let mut y = Array4::<f64>::zeros((bsz, c, oh, ow));
        for bi in 0..bsz {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let win = xv.slice(s![bi, ci, i * sh..i * sh + kh, j * sw..j * sw + kw]);
                        y[[bi, ci, i, j]] = win.sum() * inv;
                    }
                }
            }
        }
        self.push(y.into_dyn(), Op::AvgPool2d { x, kh, kw, sh, sw })
    }

    /// Batch normalization over (N,H,W) per channel, batch statistics.
    /// Returns (output, batch_mean, batch_var_biased) so the caller can
    /// maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Array1<f64>, Array1<f64>) {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = dims4(xv.shape());
        let n = (bsz * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let ch = xv.slice(s![.., ci, .., ..]);
            let m = ch.sum() / n;
            mean[ci] = m;
            var[ci] = ch.mapv(|t| (t - m) * (t - m)).sum() / n;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut x_hat = xv.to_owned();
        for ci in 0..c {
            let m = mean[ci];
            let is = inv_std[ci];
            x_hat.slice_mut(s![.., ci, .., ..]).mapv_inplace(|t| (t - m) * is);
        }
        let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut y = x_hat.clone();
        for ci in 0..c {
            let g = gv[ci];
            let b = bv[ci];
            y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|t| t * g + b);
        }
        let id = self.push(
            y.into_dyn(),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                cache: BnCache { x_hat: x_hat.into_dyn(), inv_std },
            },
        );
        (id, mean, var)
    }

    /// Per-channel affine y = scale_c * x + shift_c (inference-mode batch norm).
    pub fn affine_channels(&mut self, x: NodeId, scale: Array1<f64>, shift: Array1<f64>) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let c = xv.shape()[1];
        let mut y = xv.to_owned();
        for ci in 0..c {
            let sc = scale[ci];
            let sh = shift[ci];
            y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|t| t * sc + sh);
        }
        self.push(y.into_dyn(), Op::AffineChannels { x, scale })
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().unwrap();
        let lead: usize = xv.len() / d;
        let x2 = xv.view().into_shape_with_order((lead, d)).unwrap();
        let mut x_hat = Array2::<f64>::zeros((lead, d));
        let mut inv_std = Array1::<f64>::zeros(lead);
        for i in 0..lead {
            let row = x2.row(i);
            let m = row.sum() / d as f64;
            let v = row.mapv(|t| (t - m) * (t - m)).sum() / d as f64;
            let is = 1.0 / (v + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                x_hat[[i, j]] = (x2[[i, j]] - m) * is;
            }
        }
        let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut y = Array2::<f64>::zeros((lead, d));
        for i in 0..lead {
            for j in 0..d {
                y[[i, j]] = x_hat[[i, j]] * gv[j] + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        let y = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        let x_hat = x_hat.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache: LnCache { x_hat, inv_std: inv_std.into_dyn() },
            },
        )
    }

    pub fn elu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| if t > 0.0 { t } else { alpha * (t.exp() - 1.0) });
        self.push(v, Op::Elu { x, alpha })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| if t > 0.0 { t } else { slope * t });
        self.push(v, Op::LeakyRelu { x, slope })
    }

    /// Inverted dropout. Identity (no node) when the graph is in
    /// inference mode or p == 0.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> NodeId {
        if !self.training || p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask = self.nodes[x.0]
            .value
            .mapv(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let v = &self.nodes[x.0].value * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().unwrap();
        let lead = xv.len() / d;
        let x2 = xv.view().into_shape_with_order((lead, d)).unwrap();
        let mut y = Array2::<f64>::zeros((lead, d));
        for i in 0..lead {
            let row = x2.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                y[[i, j]] = e;
                sum += e;
            }
            for j in 0..d {
                y[[i, j]] /= sum;
            }
        }
        let shape = xv.shape().to_vec();
        let y = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(y, Op::SoftmaxLast { x })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let from = self.nodes[x.0].value.shape().to_vec();
        let v = self.nodes[x.0]
            .value
            .view()
            .into_shape_with_order(IxDyn(shape))
            .unwrap()
            .to_owned();
        self.push(v, Op::Reshape { x, from })
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Permute { x, axes: axes.to_vec() })
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<_> = xs.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).unwrap();
        self.push(v, Op::Concat { xs: xs.to_vec(), axis })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[x.0].value.sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[x.0].value.sum() / n);
        self.push(v, Op::MeanAll(x))
    }

    /// Row-wise L2 normalization with an epsilon in the denominator;
    /// exact-zero rows pass through as zeros.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let mut y = xv.clone();
        for mut row in y.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|t| t / (n + eps));
        }
        self.push(y.into_dyn(), Op::L2NormalizeRows { x, eps })
    }

    /// Pairwise cosine similarity: out[i][j] = <a_i, b_j> / (|a_i||b_j| + eps).
    pub fn cosine_sim_matrix(&mut self, a: NodeId, b: NodeId, eps: f64) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.shape()[1], bv.shape()[1], "cosine dim mismatch");
        let na = row_norms(&av);
        let nb = row_norms(&bv);
        let mut p = av.dot(&bv.t());
        for i in 0..p.shape()[0] {
            for j in 0..p.shape()[1] {
                p[[i, j]] /= na[i] * nb[j] + eps;
            }
        }
        self.push(p.into_dyn(), Op::CosineSimMatrix { a, b, eps })
    }

    /// Cosine similarity of corresponding rows: out[i] = cos(a_i, b_i).
    pub fn cosine_rows_paired(&mut self, a: NodeId, b: NodeId, eps: f64) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "paired cosine shape mismatch");
        let n = av.shape()[0];
        let mut out = Array1::<f64>::zeros(n);
        for i in 0..n {
            let ai = av.row(i);
            let bi = bv.row(i);
            let na = ai.dot(&ai).sqrt();
            let nb = bi.dot(&bi).sqrt();
            out[i] = ai.dot(&bi) / (na * nb + eps);
        }
        self.push(out.into_dyn(), Op::CosineRowsPaired { a, b, eps })
    }

    /// Mean cross-entropy of square logits against the identity target
    /// (row i's positive is column i). Log-sum-exp stabilized.
    pub fn cross_entropy_rows(&mut self, logits: NodeId) -> NodeId {
        let lv = as2(&self.nodes[logits.0].value);
        let n = lv.shape()[0];
        assert_eq!(n, lv.shape()[1], "cross_entropy_rows expects square logits");
        let mut sm = Array2::<f64>::zeros((n, n));
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - m).exp();
                sm[[i, j]] = e;
                sum += e;
            }
            for j in 0..n {
                sm[[i, j]] /= sum;
            }
            loss += -(row[i] - m - sum.ln());
        }
        loss /= n as f64;
        let v = ArrayD::from_elem(IxDyn(&[]), loss);
        self.push(v, Op::CrossEntropyRows { logits, softmax: sm })
    }

    /// Backpropagate from a scalar node. Gradients accumulate into every
    /// node reachable from `root`, including intermediates.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0);
        self.nodes[root.0].grad = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            self.backward_step(i);
        }
    }

    fn accumulate(&mut self, id: NodeId, contribution: Arr) {
        // Constants never need gradients; skip the allocation.
        if let Op::Leaf { requires_grad: false } = self.nodes[id.0].op {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &contribution,
            slot => *slot = Some(contribution),
        }
    }

    fn backward_step(&mut self, i: usize) {
        let g = self.nodes[i].grad.clone().unwrap();
        // Parents always precede node i on the tape.
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.mapv(|t| -t));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = &g * &self.nodes[b.0].value;
                let gb = &g * &self.nodes[a.0].value;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::ScaleConst(x, c) => {
                let (x, c) = (*x, *c);
                self.accumulate(x, g.mapv(|t| t * c));
            }
            Op::AddConst(x) => {
                let x = *x;
                self.accumulate(x, g);
            }
            Op::ScaleByScalar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.scalar_value(s);
                let gx = g.mapv(|t| t * sv);
                let gs_val = (&g * &self.nodes[x.0].value).sum();
                let gs = ArrayD::from_elem(self.nodes[s.0].value.raw_dim(), gs_val);
                self.accumulate(x, gx);
                self.accumulate(s, gs);
            }
            Op::Exp(x) => {
                let x = *x;
                let gx = &g * &self.nodes[i].value;
                self.accumulate(x, gx);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let gv = as2(&g);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                let ga = gv.dot(&bv.t()).into_dyn();
                let gb = av.t().dot(&gv).into_dyn();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::BatchedMatMul(a, b) => {
                let (a, b) = (*a, *b);
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let n = av.shape()[0];
                let mut ga = ndarray::Array3::<f64>::zeros((n, av.shape()[1], av.shape()[2]));
                let mut gb = ndarray::Array3::<f64>::zeros((n, bv.shape()[1], bv.shape()[2]));
                for t in 0..n {
                    let gt = gv.index_axis(Axis(0), t);
                    ga.index_axis_mut(Axis(0), t)
                        .assign(&gt.dot(&bv.index_axis(Axis(0), t).t()));
                    gb.index_axis_mut(Axis(0), t)
                        .assign(&av.index_axis(Axis(0), t).t().dot(&gt));
                }
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let gv = as2(&g);
                let xv = as2(&self.nodes[x.0].value);
                let wv = as2(&self.nodes[w.0].value);
                let gx = gv.dot(&wv).into_dyn();
                let gw = gv.t().dot(&xv).into_dyn();
                self.accumulate(x, gx);
                self.accumulate(w, gw);
                if let Some(bid) = b {
                    let gb = gv.sum_axis(Axis(0)).into_dyn();
                    self.accumulate(bid, gb);
                }
            }
            Op::Conv2d { x, w, b, cache } => {
                let (x, w, b) = (*x, *w, *b);
                let col = cache.col.clone();
                let (oh, ow) = cache.out_hw;
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let (cout, cin, kh, kw) = dims4(wv.shape());
                let w_mat = wv.to_owned().into_shape_with_order((cout, cin * kh * kw)).unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let bsz = g4.shape()[0];
                // (B,Cout,OH,OW) -> (B*OH*OW, Cout)
                let g_mat = g4
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((bsz * oh * ow, cout))
                    .unwrap();
                let gw = g_mat
                    .t()
                    .dot(&col)
                    .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                    .unwrap();
                let gcol = g_mat.dot(&w_mat);
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let gx = col2im(&gcol, &xshape, kh, kw, oh, ow);
                self.accumulate(x, gx.into_dyn());
                self.accumulate(w, gw);
                if let Some(bid) = b {
                    let gb = g_mat.sum_axis(Axis(0)).into_dyn();
                    self.accumulate(bid, gb);
                }
            }
            Op::AvgPool2d { x, kh, kw, sh, sw } => {
                let (x, kh, kw, sh, sw) = (*x, *kh, *kw, *sh, *sw);
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, c, oh, ow) = dims4(g4.shape());
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let mut gx = Array4::<f64>::zeros((xshape[0], xshape[1], xshape[2], xshape[3]));
                let inv = 1.0 / (kh * kw) as f64;
                for bi in 0..bsz {
                    for ci in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = g4[[bi, ci, i, j]] * inv;
                                let mut win =
                                    gx.slice_mut(s![bi, ci, i * sh..i * sh + kh, j * sw..j * sw + kw]);
                                win.mapv_inplace(|t| t + gv);
                            }
                        }
                    }
                }
                self.accumulate(x, gx.into_dyn());
            }
            Op::BatchNormTrain { x, gamma, beta, cache } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let x_hat = cache.x_hat.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let inv_std = cache.inv_std.clone();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, c, h, w) = dims4(g4.shape());
                let n = (bsz * h * w) as f64;
                let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut gx = Array4::<f64>::zeros((bsz, c, h, w));
                for ci in 0..c {
                    let gch = g4.slice(s![.., ci, .., ..]);
                    let xch = x_hat.slice(s![.., ci, .., ..]);
                    let sum_g = gch.sum();
                    let sum_gx = (&gch * &xch).sum();
                    dgamma[ci] = sum_gx;
                    dbeta[ci] = sum_g;
                    let k = gv[ci] * inv_std[ci];
                    let mg = sum_g / n;
                    let mgx = sum_gx / n;
                    let mut out = gx.slice_mut(s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut out).and(&gch).and(&xch).for_each(|o, &gg, &xx| {
                        *o = k * (gg - mg - xx * mgx);
                    });
                }
                self.accumulate(x, gx.into_dyn());
                self.accumulate(gamma, dgamma.into_dyn());
                self.accumulate(beta, dbeta.into_dyn());
            }
            Op::AffineChannels { x, scale, .. } => {
                let x = *x;
                let scale = scale.clone();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let c = g4.shape()[1];
                let mut gx = g4.to_owned();
                for ci in 0..c {
                    let sc = scale[ci];
                    gx.slice_mut(s![.., ci, .., ..]).mapv_inplace(|t| t * sc);
                }
                self.accumulate(x, gx.into_dyn());
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let shape = g.shape().to_vec();
                let d = *shape.last().unwrap();
                let lead = g.len() / d;
                let g2 = g.view().into_shape_with_order((lead, d)).unwrap().to_owned();
                let xh = cache.x_hat.view().into_shape_with_order((lead, d)).unwrap().to_owned();
                let inv_std = cache.inv_std.view().into_shape_with_order(lead).unwrap().to_owned();
                let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                let mut dgamma = Array1::<f64>::zeros(d);
                let mut dbeta = Array1::<f64>::zeros(d);
                let mut gx = Array2::<f64>::zeros((lead, d));
                for i in 0..lead {
                    let mut sum_gs = 0.0;
                    let mut sum_gsx = 0.0;
                    for j in 0..d {
                        let gs = g2[[i, j]] * gv[j];
                        sum_gs += gs;
                        sum_gsx += gs * xh[[i, j]];
                        dgamma[j] += g2[[i, j]] * xh[[i, j]];
                        dbeta[j] += g2[[i, j]];
                    }
                    let mg = sum_gs / d as f64;
                    let mgx = sum_gsx / d as f64;
                    for j in 0..d {
                        let gs = g2[[i, j]] * gv[j];
                        gx[[i, j]] = inv_std[i] * (gs - mg - xh[[i, j]] * mgx);
                    }
                }
                let gx = gx.into_shape_with_order(IxDyn(&shape)).unwrap();
                self.accumulate(x, gx);
                self.accumulate(gamma, dgamma.into_dyn());
                self.accumulate(beta, dbeta.into_dyn());
            }
            Op::Elu { x, alpha } => {
                let (x, alpha) = (*x, *alpha);
                let y = &self.nodes[i].value;
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(xv).and(y).for_each(|gg, &xx, &yy| {
                    *gg *= if xx > 0.0 { 1.0 } else { yy + alpha };
                });
                self.accumulate(x, gx);
            }
            Op::LeakyRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(xv).for_each(|gg, &xx| {
                    *gg *= if xx > 0.0 { 1.0 } else { slope };
                });
                self.accumulate(x, gx);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let gx = &g * mask;
                self.accumulate(x, gx);
            }
            Op::SoftmaxLast { x } => {
                let x = *x;
                let y = self.nodes[i].value.clone();
                let d = *y.shape().last().unwrap();
                let lead = y.len() / d;
                let y2 = y.view().into_shape_with_order((lead, d)).unwrap();
                let g2 = g.view().into_shape_with_order((lead, d)).unwrap();
                let mut gx = Array2::<f64>::zeros((lead, d));
                for r in 0..lead {
                    let dot = y2.row(r).dot(&g2.row(r));
                    for j in 0..d {
                        gx[[r, j]] = y2[[r, j]] * (g2[[r, j]] - dot);
                    }
                }
                let shape = y.shape().to_vec();
                self.accumulate(x, gx.into_shape_with_order(IxDyn(&shape)).unwrap());
            }
            Op::Reshape { x, from } => {
                let x = *x;
                let from = from.clone();
                let gx = g.view().into_shape_with_order(IxDyn(&from)).unwrap().to_owned();
                self.accumulate(x, gx);
            }
            Op::Permute { x, axes } => {
                let x = *x;
                let mut inverse = vec![0usize; axes.len()];
                for (pos, &ax) in axes.iter().enumerate() {
                    inverse[ax] = pos;
                }
                let gx = g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned();
                self.accumulate(x, gx);
            }
            Op::Concat { xs, axis } => {
                let xs = xs.clone();
                let axis = *axis;
                let mut offset = 0usize;
                for xid in xs {
                    let len = self.nodes[xid.0].value.shape()[axis];
                    let part = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    offset += len;
                    self.accumulate(xid, part);
                }
            }
            Op::SumAll(x) => {
                let x = *x;
                let gv = g.iter().next().copied().unwrap();
                let gx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv);
                self.accumulate(x, gx);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.len() as f64;
                let gv = g.iter().next().copied().unwrap() / n;
                let gx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv);
                self.accumulate(x, gx);
            }
            Op::L2NormalizeRows { x, eps } => {
                let (x, eps) = (*x, *eps);
                let xv = as2(&self.nodes[x.0].value);
                let g2 = as2(&g);
                let mut gx = Array2::<f64>::zeros(xv.raw_dim());
                for i in 0..xv.shape()[0] {
                    let row = xv.row(i);
                    let grow = g2.row(i);
                    let n = row.dot(&row).sqrt();
                    let denom = n + eps;
                    let dot = grow.dot(&row);
                    for j in 0..xv.shape()[1] {
                        let second = if n > 0.0 { row[j] * dot / (n * denom * denom) } else { 0.0 };
                        gx[[i, j]] = grow[j] / denom - second;
                    }
                }
                self.accumulate(x, gx.into_dyn());
            }
            Op::CosineSimMatrix { a, b, eps } => {
                let (a, b, eps) = (*a, *b, *eps);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                let sv = as2(&self.nodes[i].value);
                let g2 = as2(&g);
                let na = row_norms(&av);
                let nb = row_norms(&bv);
                let (n, m) = (av.shape()[0], bv.shape()[0]);
                // w1 = g / q, with q_ij = na_i*nb_j + eps
                let mut w1 = g2.clone();
                for r in 0..n {
                    for c in 0..m {
                        w1[[r, c]] /= na[r] * nb[c] + eps;
                    }
                }
                let a_hat = unit_rows(&av, &na);
                let b_hat = unit_rows(&bv, &nb);
                // dA = w1·B - diag(c_a)·Â with c_a_i = Σ_j w1_ij s_ij nb_j
                let mut ga = w1.dot(&bv);
                for r in 0..n {
                    let mut coef = 0.0;
                    for c in 0..m {
                        coef += w1[[r, c]] * sv[[r, c]] * nb[c];
                    }
                    for j in 0..av.shape()[1] {
                        ga[[r, j]] -= coef * a_hat[[r, j]];
                    }
                }
                let mut gb = w1.t().dot(&av);
                for c in 0..m {
                    let mut coef = 0.0;
                    for r in 0..n {
                        coef += w1[[r, c]] * sv[[r, c]] * na[r];
                    }
                    for j in 0..bv.shape()[1] {
                        gb[[c, j]] -= coef * b_hat[[c, j]];
                    }
                }
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::CosineRowsPaired { a, b, eps } => {
                let (a, b, eps) = (*a, *b, *eps);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                let cv = self.nodes[i].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                let (n, d) = (av.shape()[0], av.shape()[1]);
                let mut ga = Array2::<f64>::zeros((n, d));
                let mut gb = Array2::<f64>::zeros((n, d));
                for r in 0..n {
                    let ar = av.row(r);
                    let br = bv.row(r);
                    let na = ar.dot(&ar).sqrt();
                    let nb = br.dot(&br).sqrt();
                    let q = na * nb + eps;
                    for j in 0..d {
                        let ah = if na > 0.0 { ar[j] / na } else { 0.0 };
                        let bh = if nb > 0.0 { br[j] / nb } else { 0.0 };
                        ga[[r, j]] = g1[r] * (br[j] / q - cv[r] * nb * ah / q);
                        gb[[r, j]] = g1[r] * (ar[j] / q - cv[r] * na * bh / q);
                    }
                }
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::CrossEntropyRows { logits, softmax } => {
                let logits = *logits;
                let n = softmax.shape()[0];
                let gv = g.iter().next().copied().unwrap();
                let mut gx = softmax.clone();
                for r in 0..n {
                    gx[[r, r]] -= 1.0;
                }
                gx.mapv_inplace(|t| t * gv / n as f64);
                self.accumulate(logits, gx.into_dyn());
            }
        }
    }
}

fn as2(a: &Arr) -> Array2<f64> {
    a.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

fn row_norms(a: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::<f64>::zeros(a.shape()[0]);
    for (i, row) in a.rows().into_iter().enumerate() {
        out[i] = row.dot(&row).sqrt();
    }
    out
}

fn unit_rows(a: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        if norms[i] > 0.0 {
            row.mapv_inplace(|t| t / norms[i]);
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// (B,Cin,H,W) -> (B*OH*OW, Cin*KH*KW) for valid stride-1 convolution.
fn im2col(x: &Array4<f64>, kh: usize, kw: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (bsz, cin, _h, _w) = dims4(x.shape());
    let k = cin * kh * kw;
    let mut col = Array2::<f64>::zeros((bsz * oh * ow, k));
    for bi in 0..bsz {
        for i in 0..oh {
            for j in 0..ow {
                let row_idx = (bi * oh + i) * ow + j;
                let mut cidx = 0usize;
                for ci in 0..cin {
                    for di in 0..kh {
                        for dj in 0..kw {
                            col[[row_idx, cidx]] = x[[bi, ci, i + di, j + dj]];
                            cidx += 1;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the column gradient back to input layout.
fn col2im(gcol: &Array2<f64>, xshape: &[usize], kh: usize, kw: usize, oh: usize, ow: usize) -> Array4<f64> {
    let (bsz, cin, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let mut gx = Array4::<f64>::zeros((bsz, cin, h, w));
    for bi in 0..bsz {
        for i in 0..oh {
            for j in 0..ow {
                let row_idx = (bi * oh + i) * ow + j;
                let mut cidx = 0usize;
                for ci in 0..cin {
                    for di in 0..kh {
                        for dj in 0..kw {
                            gx[[bi, ci, i + di, j + dj]] += gcol[[row_idx, cidx]];
                            cidx += 1;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Arr {
        use rand_distr::{Distribution, StandardNormal};
        ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(r))
    }

    /// Central finite-difference check of d(scalar_fn)/d(input) along a
    /// random direction, at f64 precision.
    fn check_grad<F>(shape: &[usize], build: F, tol: f64, seed: u64)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let mut r = rng(seed);
        let x0 = randn(shape, &mut r);
        let dir = randn(shape, &mut r);

        let mut g = Graph::new(true);
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x);
        g.backward(loss);
        let analytic = (g.grad(x).unwrap() * &dir).sum();

        let eps = 1e-6;
        let eval = |arr: Arr| -> f64 {
            let mut g = Graph::new(true);
            let x = g.leaf(arr);
            let loss = build(&mut g, x);
            g.scalar(loss)
        };
        let fplus = eval(&x0 + &dir.mapv(|t| t * eps));
        let fminus = eval(&x0 - &dir.mapv(|t| t * eps));
        let numeric = (fplus - fminus) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        assert!(
            rel < tol,
            "gradient mismatch: analytic={analytic} numeric={numeric} rel={rel}"
        );
    }

    #[test]
    fn grad_matmul_chain() {
        check_grad(
            &[3, 4],
            |g, x| {
                let w = {
                    let mut r = rng(99);
                    g.constant(randn(&[4, 5], &mut r))
                };
                let y = g.matmul(x, w);
                let y = g.elu(y, 1.0);
                g.sum_all(y)
            },
            1e-7,
            1,
        );
    }

    #[test]
    fn grad_softmax_cross_entropy() {
        check_grad(
            &[4, 4],
            |g, x| g.cross_entropy_rows(x),
            1e-7,
            2,
        );
    }

    #[test]
    fn grad_conv_pool_bn() {
        check_grad(
            &[2, 1, 4, 12],
            |g, x| {
                let (w, b, gamma, beta) = {
                    let mut r = rng(7);
                    (
                        g.leaf(randn(&[3, 1, 1, 5], &mut r)),
                        g.leaf(randn(&[3], &mut r)),
                        g.leaf(randn(&[3], &mut r).mapv(|t| 1.0 + 0.1 * t)),
                        g.leaf(randn(&[3], &mut r)),
                    )
                };
                let y = g.conv2d(x, w, Some(b));
                let (y, _, _) = g.batch_norm_train(y, gamma, beta, 1e-5);
                let y = g.elu(y, 1.0);
                let y = g.avg_pool2d(y, 1, 2, 1, 2);
                g.sum_all(y)
            },
            1e-6,
            3,
        );
    }

    #[test]
    fn grad_layer_norm_softmax() {
        check_grad(
            &[2, 3, 6],
            |g, x| {
                let (gamma, beta) = {
                    let mut r = rng(11);
                    (
                        g.leaf(randn(&[6], &mut r).mapv(|t| 1.0 + 0.1 * t)),
                        g.leaf(randn(&[6], &mut r)),
                    )
                };
                let y = g.layer_norm(x, gamma, beta, 1e-5);
                let y = g.softmax_last(y);
                let y = g.mul(y, y);
                g.sum_all(y)
            },
            1e-6,
            4,
        );
    }

    #[test]
    fn grad_cosine_ops() {
        check_grad(
            &[3, 5],
            |g, x| {
                let other = {
                    let mut r = rng(13);
                    g.constant(randn(&[4, 5], &mut r))
                };
                let s = g.cosine_sim_matrix(x, other, 1e-12);
                let s2 = g.mul(s, s);
                g.sum_all(s2)
            },
            1e-6,
            5,
        );
        check_grad(
            &[4, 6],
            |g, x| {
                let other = {
                    let mut r = rng(17);
                    g.constant(randn(&[4, 6], &mut r))
                };
                let c = g.cosine_rows_paired(x, other, 1e-12);
                g.mean_all(c)
            },
            1e-6,
            6,
        );
    }

    #[test]
    fn grad_l2_normalize() {
        check_grad(
            &[4, 3],
            |g, x| {
                let probe = {
                    let mut r = rng(21);
                    g.constant(randn(&[4, 3], &mut r))
                };
                let y = g.l2_normalize_rows(x, 1e-12);
                let y2 = g.mul(y, probe);
                g.sum_all(y2)
            },
            1e-6,
            8,
        );
    }

    #[test]
    fn grad_batched_matmul_permute_concat() {
        check_grad(
            &[2, 3, 4],
            |g, x| {
                let other = {
                    let mut r = rng(19);
                    g.constant(randn(&[2, 4, 3], &mut r))
                };
                let y = g.batched_matmul(x, other); // (2,3,3)
                let y = g.softmax_last(y);
                let p = g.permute(y, &[1, 0, 2]);
                let c = g.concat(&[p, p], 2);
                let probe = {
                    let mut r = rng(20);
                    g.constant(randn(&[3, 2, 6], &mut r))
                };
                let c = g.mul(c, probe);
                g.mean_all(c)
            },
            1e-6,
            9,
        );
    }

    #[test]
    fn grad_scale_by_scalar_and_exp() {
        let mut r = rng(23);
        let x0 = randn(&[3, 3], &mut r);
        let mut g = Graph::new(true);
        let tau = g.scalar_leaf(0.3);
        let x = g.constant(x0.clone());
        let scale = g.exp(tau);
        let y = g.scale_by_scalar(x, scale);
        let loss = g.cross_entropy_rows(y);
        g.backward(loss);
        let analytic = g.grad(tau).unwrap().iter().next().copied().unwrap();

        let eval = |t: f64| -> f64 {
            let mut g = Graph::new(true);
            let tau = g.scalar_leaf(t);
            let x = g.constant(x0.clone());
            let scale = g.exp(tau);
            let y = g.scale_by_scalar(x, scale);
            let loss = g.cross_entropy_rows(y);
            g.scalar(loss)
        };
        let eps = 1e-6;
        let numeric = (eval(0.3 + eps) - eval(0.3 - eps)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-7, "tau grad rel error {rel}");
    }

    #[test]
    fn dropout_is_identity_in_inference() {
        let mut g = Graph::new(false);
        let mut r = rng(31);
        let x0 = randn(&[2, 8], &mut r);
        let x = g.leaf(x0.clone());
        let y = g.dropout(x, 0.5, &mut r);
        assert_eq!(x, y);
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut g = Graph::new(true);
        let mut r = rng(37);
        let x0 = ArrayD::from_elem(IxDyn(&[1000]), 1.0);
        let x = g.leaf(x0);
        let y = g.dropout(x, 0.5, &mut r);
        let vals = g.value(y);
        for &v in vals.iter() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!(kept > 400 && kept < 600, "kept {kept} of 1000 at p=0.5");
    }

    #[test]
    fn zero_row_normalization_has_no_nan() {
        let mut g = Graph::new(false);
        let x = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![3.0, 4.0, 0.0, 0.0]).unwrap(),
        );
        let y = g.l2_normalize_rows(x, 1e-12);
        let loss = g.sum_all(y);
        g.backward(loss);
        let v = g.value(y);
        assert!((v[[0, 0]] - 0.6).abs() < 1e-9);
        assert!((v[[0, 1]] - 0.8).abs() < 1e-9);
        assert_eq!(v[[1, 0]], 0.0);
        assert!(g.grad(x).unwrap().iter().all(|t| t.is_finite()));
    }
}
