//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes created
//! with [`Graph::param`] receive gradients from [`Graph::backward`]; nodes
//! created with [`Graph::input`] are constants. Scalars are `1 × 1` matrices.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, inv_std: Vec<f64> },
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    MaxPoolRows { x: NodeId, argmax: Vec<Vec<Option<usize>>> },
    Nll { probs: NodeId, targets: Vec<usize>, denom: f64 },
    Bce { probs: NodeId, targets: Mat, denom: f64 },
    Sum(Vec<NodeId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Softmax,
    LayerNorm,
    Other,
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat> {
        self.grads[id.0].take()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn clamped(p: f64) -> bool {
    !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)
}

fn softmax_in_place(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    softmax_in_place(&mut out);
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        match self.nodes[id.0].op {
            Op::SoftmaxRows(_) => NodeKind::Softmax,
            Op::LayerNormRows { .. } => NodeKind::LayerNorm,
            _ => NodeKind::Other,
        }
    }

    /// Every node of the given kind, in creation order.
    pub fn nodes_of_kind(&self, kind: NodeKind) -> Vec<NodeId> {
        (0..self.nodes.len())
            .map(NodeId)
            .filter(|&id| self.kind(id) == kind)
            .collect()
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 × d` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x d row");
        let v = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` element-wise by a `1 × d` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1 x d row");
        let v = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardization without the affine part:
    /// `(x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNormRows { x: a, inv_std }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start, end), rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let v = self.value(a).select(Axis(0), rows);
        let rg = self.rg(&[a]);
        self.push(v, Op::GatherRows(a, rows.to_vec()), rg)
    }

    /// One output row per `start..end` range: the element-wise maximum over
    /// those rows of `a`, or zeros for an empty range.
    pub fn max_pool_rows(&mut self, a: NodeId, ranges: &[(usize, usize)]) -> NodeId {
        let x = self.value(a);
        let d = x.ncols();
        let mut out = Mat::zeros((ranges.len(), d));
        let mut argmax = Vec::with_capacity(ranges.len());
        for (r, &(lo, hi)) in ranges.iter().enumerate() {
            let mut arg = vec![None; d];
            if lo < hi {
                for c in 0..d {
                    let mut best = lo;
                    for i in lo + 1..hi {
                        if x[[i, c]] > x[[best, c]] {
                            best = i;
                        }
                    }
                    out[[r, c]] = x[[best, c]];
                    arg[c] = Some(best);
                }
            }
            argmax.push(arg);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::MaxPoolRows { x: a, argmax }, rg)
    }

    /// `-(1/denom) Σ_i ln p[i, targets[i]]` over a row-stochastic matrix.
    pub fn nll(&mut self, probs: NodeId, targets: &[usize], denom: f64) -> NodeId {
        let p = self.value(probs);
        assert_eq!(p.nrows(), targets.len());
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -clamp_prob(p[[i, t]]).ln())
            .sum();
        let rg = self.rg(&[probs]);
        self.push(
            Mat::from_elem((1, 1), total / denom),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                denom,
            },
            rg,
        )
    }

    /// Binary cross-entropy summed over columns and rows, divided by `denom`.
    pub fn bce(&mut self, probs: NodeId, targets: Mat, denom: f64) -> NodeId {
        let p = self.value(probs);
        assert_eq!(p.dim(), targets.dim());
        let total: f64 = p
            .iter()
            .zip(targets.iter())
            .map(|(&p, &y)| {
                let c = clamp_prob(p);
                -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
            })
            .sum();
        let rg = self.rg(&[probs]);
        self.push(
            Mat::from_elem((1, 1), total / denom),
            Op::Bce {
                probs,
                targets,
                denom,
            },
            rg,
        )
    }

    /// Sum of `1 × 1` scalars.
    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        let total: f64 = parts.iter().map(|&p| self.scalar(p)).sum();
        let rg = self.rg(parts);
        self.push(Mat::from_elem((1, 1), total), Op::Sum(parts.to_vec()), rg)
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.dot(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g * val(*row));
                }
                if wants(*row) {
                    let gr = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, g * &y.mapv(|y| y * (1.0 - y)));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let gy = g * y;
                let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accumulate(grads, *a, gy - &(y * &dots));
            }
            Op::LayerNormRows { x, inv_std } => {
                let xhat = &node.value;
                let d = xhat.ncols() as f64;
                let mut dx = Mat::zeros(xhat.raw_dim());
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let sum_g = gr.sum();
                    let sum_gx = gr.dot(&xr);
                    for c in 0..xhat.ncols() {
                        dx[[r, c]] = inv / d * (d * gr[c] - sum_g - xr[c] * sum_gx);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if wants(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                if wants(*a) {
                    let mut d = Mat::zeros(val(*a).raw_dim());
                    d.slice_mut(s![.., *start..*end]).assign(g);
                    self.accumulate(grads, *a, d);
                }
            }
            Op::GatherRows(a, rows) => {
                if wants(*a) {
                    let mut d = Mat::zeros(val(*a).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(src);
                        dst += &g.row(r);
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                if wants(*x) {
                    let mut d = Mat::zeros(val(*x).raw_dim());
                    for (r, arg) in argmax.iter().enumerate() {
                        for (c, src) in arg.iter().enumerate() {
                            if let Some(src) = src {
                                d[[*src, c]] += g[[r, c]];
                            }
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Nll {
                probs,
                targets,
                denom,
            } => {
                let p = val(*probs);
                let mut d = Mat::zeros(p.raw_dim());
                let upstream = g[[0, 0]];
                for (i, &t) in targets.iter().enumerate() {
                    let pi = p[[i, t]];
                    if !clamped(pi) {
                        d[[i, t]] = -upstream / (denom * pi);
                    }
                }
                self.accumulate(grads, *probs, d);
            }
            Op::Bce {
                probs,
                targets,
                denom,
            } => {
                let p = val(*probs);
                let upstream = g[[0, 0]];
                let mut d = Mat::zeros(p.raw_dim());
                ndarray::Zip::from(&mut d)
                    .and(p)
                    .and(targets)
                    .for_each(|d, &p, &y| {
                        if !clamped(p) {
                            *d = -upstream * (y / p - (1.0 - y) / (1.0 - p)) / denom;
                        }
                    });
                self.accumulate(grads, *probs, d);
            }
            Op::Sum(parts) => {
                for p in parts {
                    self.accumulate(grads, *p, g.clone());
                }
            }
        }
    }
}
