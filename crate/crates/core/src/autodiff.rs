//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, which is always a
//! valid topological order. Parameter leaves can be overwritten and the tape
//! replayed, which is what [`fd_check`] relies on.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul { x: NodeId, w: NodeId },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Sigmoid(NodeId),
    Mse { pred: NodeId, target: NodeId },
    BinaryCe { logit: NodeId, labels: Vec<f64> },
    SoftmaxCe { logits: NodeId, labels: Vec<usize> },
    MarginContrastive { a: NodeId, b: NodeId, margin: f64 },
    Detach(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Forward tape of one computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    /// Replaces the value of a parameter leaf. Downstream nodes keep stale
    /// values until [`Graph::recompute`] runs.
    pub fn set_param(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Param) {
            return Err(Error::InvalidTensor(format!("node {} is not a parameter", id.0)));
        }
        node.value.same_shape(&value, "set_param")?;
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every operation node in tape order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Param | Op::Constant) {
                continue;
            }
            let v = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = v;
        }
        Ok(())
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push_leaf(Op::Param, value, true);
        self.params.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, value, false)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let requires_grad = match &op {
            Op::Param => true,
            Op::Constant | Op::Detach(_) => false,
            other => inputs(other).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// `x·w + b` for `x: B×I`, `w: I×O`, `b: O`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { x, w })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    /// Mean squared difference. Both operands may carry gradients.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.push(Op::Mse { pred, target })
    }

    /// Mean logistic loss `ln(1 + exp(-s·logit))` with `s = 2·label - 1`.
    pub fn binary_ce(&mut self, logit: NodeId, labels: &[f64]) -> Result<NodeId> {
        for (index, &value) in labels.iter().enumerate() {
            if value != 0.0 && value != 1.0 {
                return Err(Error::InvalidLabel { index, value });
            }
        }
        self.push(Op::BinaryCe {
            logit,
            labels: labels.to_vec(),
        })
    }

    /// Mean softmax cross-entropy of `logits: B×C` against class indices.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let classes = self.value(logits).cols();
        for (index, &value) in labels.iter().enumerate() {
            if value >= classes {
                return Err(Error::InvalidClass {
                    index,
                    value,
                    classes,
                });
            }
        }
        self.push(Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Margin contrastive loss between row-paired embeddings:
    /// `mean_i ‖a_i − b_i‖² + mean_{i≠j} max(0, margin − ‖a_i − b_j‖)²`.
    pub fn margin_contrastive(&mut self, a: NodeId, b: NodeId, margin: f64) -> Result<NodeId> {
        self.push(Op::MarginContrastive { a, b, margin })
    }

    /// Identity in the forward pass, blocks gradients in the backward pass.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Detach(x))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Param | Op::Constant => unreachable!("leaves are not evaluated"),
            Op::Affine { x, w, b } => {
                let mut out = matmul_forward(v(x), v(w), "affine")?;
                let bias = v(b);
                let o = out.cols();
                if bias.len() != o {
                    return Err(Error::Shape {
                        op: "affine",
                        left: v(w).shape().to_vec(),
                        right: bias.shape().to_vec(),
                    });
                }
                for row in out.data_mut().chunks_mut(o) {
                    for (r, bv) in row.iter_mut().zip(bias.data()) {
                        *r += bv;
                    }
                }
                out
            }
            Op::MatMul { x, w } => matmul_forward(v(x), v(w), "matmul")?,
            Op::Relu(x) => v(x).map(|a| a.max(0.0)),
            Op::Add(a, b) => zip_values(v(a), v(b), "add", |p, q| p + q)?,
            Op::Sub(a, b) => zip_values(v(a), v(b), "sub", |p, q| p - q)?,
            Op::Mul(a, b) => zip_values(v(a), v(b), "mul", |p, q| p * q)?,
            Op::Scale(x, c) => v(x).map(|a| a * c),
            Op::Sum(x) => Tensor::scalar(v(x).data().iter().sum()),
            Op::Mean(x) => {
                let t = v(x);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::Sigmoid(x) => v(x).map(sigmoid),
            Op::Mse { pred, target } => {
                let (p, t) = (v(pred), v(target));
                p.same_shape(t, "mse")?;
                let s: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                Tensor::scalar(s / p.len() as f64)
            }
            Op::BinaryCe { logit, labels } => {
                let z = v(logit);
                if z.len() != labels.len() {
                    return Err(Error::Shape {
                        op: "binary_ce",
                        left: z.shape().to_vec(),
                        right: vec![labels.len()],
                    });
                }
                let s: f64 = z
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&zi, &y)| softplus(-(2.0 * y - 1.0) * zi))
                    .sum();
                Tensor::scalar(s / labels.len() as f64)
            }
            Op::SoftmaxCe { logits, labels } => {
                let z = v(logits);
                if z.rows() != labels.len() || z.shape().len() != 2 {
                    return Err(Error::Shape {
                        op: "softmax_ce",
                        left: z.shape().to_vec(),
                        right: vec![labels.len()],
                    });
                }
                let mut total = 0.0;
                for (r, &y) in labels.iter().enumerate() {
                    let row = z.row(r);
                    total += log_sum_exp(row) - row[y];
                }
                Tensor::scalar(total / labels.len() as f64)
            }
            Op::MarginContrastive { a, b, margin } => {
                let (ea, eb) = (v(a), v(b));
                ea.same_shape(eb, "margin_contrastive")?;
                let n = ea.rows();
                if n < 2 {
                    return Err(Error::BatchTooSmall { needed: 2, got: n });
                }
                let mut pos = 0.0;
                let mut neg = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let d2 = sq_dist(ea.row(i), eb.row(j));
                        if i == j {
                            pos += d2;
                        } else {
                            let gap = (margin - d2.sqrt()).max(0.0);
                            neg += gap * gap;
                        }
                    }
                }
                Tensor::scalar(pos / n as f64 + neg / (n * (n - 1)) as f64)
            }
            Op::Detach(x) => v(x).clone(),
        })
    }

    /// Gradients of a scalar node with respect to every parameter leaf.
    /// Parameters that do not influence the loss receive zero tensors.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<NodeId, Tensor>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        Ok(self
            .params
            .iter()
            .map(|&p| {
                let g = grads
                    .get_mut(p.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.value(p).shape()));
                (p, g)
            })
            .collect())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Param | Op::Constant | Op::Detach(_) => {}
            Op::Affine { x, w, b } => {
                self.matmul_backward(*x, *w, g, grads);
                if self.wants(*b) {
                    let o = g.cols();
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(v(b).shape().to_vec(), db).unwrap());
                }
            }
            Op::MatMul { x, w } => self.matmul_backward(*x, *w, g, grads),
            Op::Relu(x) => {
                if self.wants(*x) {
                    let d = v(x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&a, &gi)| if a > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, with_data(v(x), d));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, with_data(v(a), g.data().to_vec()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, with_data(v(b), g.data().to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, with_data(v(a), g.data().to_vec()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, with_data(v(b), g.data().iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.data().iter().zip(v(b).data()).map(|(p, q)| p * q).collect();
                    accumulate(grads, *a, with_data(v(a), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(v(a).data()).map(|(p, q)| p * q).collect();
                    accumulate(grads, *b, with_data(v(b), d));
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.map(|gi| gi * c));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::filled(v(x).shape(), g.item()));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let t = v(x);
                    accumulate(grads, *x, Tensor::filled(t.shape(), g.item() / t.len() as f64));
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let d = out
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &gi)| gi * y * (1.0 - y))
                        .collect();
                    accumulate(grads, *x, with_data(v(x), d));
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (v(pred), v(target));
                let c = 2.0 * g.item() / p.len() as f64;
                let diff: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| c * (a - b)).collect();
                if self.wants(*target) {
                    accumulate(grads, *target, with_data(t, diff.iter().map(|d| -d).collect()));
                }
                if self.wants(*pred) {
                    accumulate(grads, *pred, with_data(p, diff));
                }
            }
            Op::BinaryCe { logit, labels } => {
                if self.wants(*logit) {
                    let z = v(logit);
                    let c = g.item() / labels.len() as f64;
                    let d = z
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&zi, &y)| {
                            let s = 2.0 * y - 1.0;
                            -s * sigmoid(-s * zi) * c
                        })
                        .collect();
                    accumulate(grads, *logit, with_data(z, d));
                }
            }
            Op::SoftmaxCe { logits, labels } => {
                if self.wants(*logits) {
                    let z = v(logits);
                    let c = g.item() / labels.len() as f64;
                    let mut d = Vec::with_capacity(z.len());
                    for (r, &y) in labels.iter().enumerate() {
                        let row = z.row(r);
                        let lse = log_sum_exp(row);
                        for (k, &zk) in row.iter().enumerate() {
                            let p = (zk - lse).exp();
                            d.push(c * (p - if k == y { 1.0 } else { 0.0 }));
                        }
                    }
                    accumulate(grads, *logits, with_data(z, d));
                }
            }
            Op::MarginContrastive { a, b, margin } => {
                let (ea, eb) = (v(a), v(b));
                let n = ea.rows();
                let dim = ea.cols();
                let gp = g.item() / n as f64;
                let gn = g.item() / (n * (n - 1)) as f64;
                let mut da = vec![0.0; ea.len()];
                let mut db = vec![0.0; eb.len()];
                for i in 0..n {
                    for j in 0..n {
                        let (ra, rb) = (ea.row(i), eb.row(j));
                        let coef = if i == j {
                            2.0 * gp
                        } else {
                            let d = sq_dist(ra, rb).sqrt();
                            if d >= *margin || d == 0.0 {
                                continue;
                            }
                            -2.0 * (margin - d) / d * gn
                        };
                        for k in 0..dim {
                            let diff = coef * (ra[k] - rb[k]);
                            da[i * dim + k] += diff;
                            db[j * dim + k] -= diff;
                        }
                    }
                }
                if self.wants(*a) {
                    accumulate(grads, *a, with_data(ea, da));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, with_data(eb, db));
                }
            }
        }
    }

    fn matmul_backward(&self, x: NodeId, w: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (bsz, i, o) = (xv.rows(), xv.cols(), wv.cols());
        if self.wants(x) {
            let mut dx = vec![0.0; bsz * i];
            gemm(bsz, o, i, 1.0, g.data(), Layout::Normal, wv.data(), Layout::Transposed, 0.0, &mut dx);
            accumulate(grads, x, with_data(xv, dx));
        }
        if self.wants(w) {
            let mut dw = vec![0.0; i * o];
            gemm(i, bsz, o, 1.0, xv.data(), Layout::Transposed, g.data(), Layout::Normal, 0.0, &mut dw);
            accumulate(grads, w, with_data(wv, dw));
        }
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Param | Op::Constant => vec![],
        Op::Affine { x, w, b } => vec![*x, *w, *b],
        Op::MatMul { x, w } => vec![*x, *w],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Mse { pred, target } => vec![*pred, *target],
        Op::MarginContrastive { a, b, .. } => vec![*a, *b],
        Op::Relu(x) | Op::Scale(x, _) | Op::Sum(x) | Op::Mean(x) | Op::Sigmoid(x) | Op::Detach(x) => {
            vec![*x]
        }
        Op::BinaryCe { logit, .. } => vec![*logit],
        Op::SoftmaxCe { logits, .. } => vec![*logits],
    }
}

fn matmul_forward(x: &Tensor, w: &Tensor, op: &'static str) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.rows() {
        return Err(Error::Shape {
            op,
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let (b, i, o) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![0.0; b * o];
    gemm(b, i, o, 1.0, x.data(), Layout::Normal, w.data(), Layout::Normal, 0.0, &mut out);
    Tensor::matrix(b, o, out)
}

fn zip_values(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    a.same_shape(b, op)?;
    Ok(with_data(
        a,
        a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect(),
    ))
}

fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient matches operand shape")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Compares analytic gradients against central finite differences over every
/// parameter coordinate. Returns the largest `|analytic − numeric| / max(1, |numeric|)`.
pub fn fd_check(graph: &Graph, loss: NodeId, eps: f64) -> Result<f64> {
    let analytic = graph.backward(loss)?;
    fd_check_against(graph, loss, eps, &analytic)
}

/// Like [`fd_check`] but with caller-supplied analytic gradients.
pub fn fd_check_against(
    graph: &Graph,
    loss: NodeId,
    eps: f64,
    analytic: &BTreeMap<NodeId, Tensor>,
) -> Result<f64> {
    assert!(eps > 0.0 && eps <= 1e-2, "eps must lie in (0, 1e-2]");
    let mut g = graph.clone();
    let mut worst: f64 = 0.0;
    for &p in graph.parameters() {
        let base = graph.value(p).clone();
        let grad = &analytic[&p];
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += eps;
            g.set_param(p, plus)?;
            g.recompute()?;
            let up = g.value(loss).item();

            let mut minus = base.clone();
            minus.data_mut()[k] -= eps;
            g.set_param(p, minus)?;
            g.recompute()?;
            let down = g.value(loss).item();

            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        g.set_param(p, base)?;
    }
    Ok(worst)
}
