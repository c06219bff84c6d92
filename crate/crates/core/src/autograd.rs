//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter the tape
//! by value through [`Graph::param`]; [`Graph::backward`] walks the tape in
//! reverse and adds each parameter's gradient into its [`ParamStore`] slot.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, elementwise, is_trailing_bias, sigmoid, ElementwiseOp, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Elementwise(ElementwiseOp, NodeId, Option<NodeId>),
    Exp(NodeId),
    Scale(NodeId, f32),
    /// Multiplies every element by a single-element node.
    MulScalar(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Transpose(NodeId),
    L2NormalizeRows(NodeId),
    MseLoss(NodeId, NodeId),
    /// Mean over rows of the cross-entropy between `softmax(row)` and a fixed
    /// target distribution.
    SoftCrossEntropy(NodeId, Tensor),
    Mean(NodeId),
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Rows with a smaller norm are treated as having this norm.
pub(crate) const NORM_FLOOR: f32 = 1e-12;

#[derive(Debug, Default, Clone)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let v = elementwise(op, self.value(a), b.map(|b| self.value(b)))?;
        Ok(self.push(v, Op::Elementwise(op, a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Silu, a, None)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Tanh, a, None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f32::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f32) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let k = self.value(s).item()?;
        let v = self.value(a).scale(k);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let rows = self.value(parts[0]).as_matrix("concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix("concat")?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::matrix(rows, total, data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.value(table).as_matrix("gather_rows")?;
        if indices.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::domain(format!("row index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let v = Tensor::matrix(indices.len(), cols, data)?;
        Ok(self.push(v, Op::GatherRows(table, indices.to_vec())))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    /// Scales each row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).as_matrix("l2_normalize_rows")?;
        let x = self.value(a).data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = row_norm(row);
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let v = Tensor::matrix(m, n, out)?;
        Ok(self.push(v, Op::L2NormalizeRows(a)))
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let l = tensor::mse_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(l), Op::MseLoss(pred, target)))
    }

    /// Row-mean cross-entropy of `softmax(logits)` against `targets`, whose
    /// rows must be probability distributions.
    pub fn soft_cross_entropy(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::Dimension {
                op: "soft_cross_entropy",
                left: lv.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let (m, n) = lv.as_matrix("soft_cross_entropy")?;
        let mut total = 0.0f64;
        for i in 0..m {
            let row = &lv.data()[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for j in 0..n {
                let t = targets.data()[i * n + j] as f64;
                if t != 0.0 {
                    total -= t * (row[j] as f64 - lse);
                }
            }
        }
        let v = Tensor::scalar((total / m as f64) as f32);
        Ok(self.push(v, Op::SoftCrossEntropy(logits, targets)))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a).data();
        let s: f64 = x.iter().map(|&v| v as f64).sum();
        let v = Tensor::scalar((s / x.len() as f64) as f32);
        self.push(v, Op::Mean(a))
    }

    /// Back-propagates from a single-element node and accumulates parameter
    /// gradients into `store`. Repeated calls add up.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &g),
                Op::MatMul(a, b) => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g)?;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = tensor::matmul(&gt, &bv.transpose()?)?;
                    let gb = tensor::matmul(&av.transpose()?, &gt)?;
                    add_into(&mut grads, *a, ga.data());
                    add_into(&mut grads, *b, gb.data());
                }
                Op::Elementwise(op, a, b) => self.elementwise_backward(*op, *a, *b, node, &g, &mut grads),
                Op::Exp(a) => {
                    let ga: Vec<f32> = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f32> = g.iter().map(|g| g * k).collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::MulScalar(a, s) => {
                    let k = self.value(*s).data()[0];
                    let ga: Vec<f32> = g.iter().map(|g| g * k).collect();
                    let gs: f64 = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g as f64 * x as f64)
                        .sum();
                    add_into(&mut grads, *a, &ga);
                    add_into(&mut grads, *s, &[gs as f32]);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.last_dim();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).last_dim();
                        let mut gp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        add_into(&mut grads, p, &gp);
                        offset += w;
                    }
                }
                Op::GatherRows(table, indices) => {
                    let tv = self.value(*table);
                    let cols = tv.last_dim();
                    let mut gt = vec![0.0f32; tv.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            gt[i * cols + c] += g[r * cols + c];
                        }
                    }
                    add_into(&mut grads, *table, &gt);
                }
                Op::Transpose(a) => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g)?.transpose()?;
                    add_into(&mut grads, *a, gt.data());
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let n = x.last_dim();
                    let y = node.value.data();
                    let mut ga = vec![0.0f32; x.len()];
                    for i in 0..x.rows() {
                        let norm = row_norm(x.row(i)) as f64;
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| y as f64 * g as f64).sum();
                        for j in 0..n {
                            ga[i * n + j] = ((gr[j] as f64 - yr[j] as f64 * dot) / norm) as f32;
                        }
                    }
                    add_into(&mut grads, *a, &ga);
                }
                Op::MseLoss(p, t) => {
                    let pv = self.value(*p).data();
                    let tv = self.value(*t).data();
                    let k = 2.0 * g[0] as f64 / pv.len() as f64;
                    let gp: Vec<f32> = pv
                        .iter()
                        .zip(tv)
                        .map(|(&p, &t)| (k * (p as f64 - t as f64)) as f32)
                        .collect();
                    let gt: Vec<f32> = gp.iter().map(|v| -v).collect();
                    add_into(&mut grads, *p, &gp);
                    add_into(&mut grads, *t, &gt);
                }
                Op::SoftCrossEntropy(logits, targets) => {
                    let lv = self.value(*logits);
                    let n = lv.last_dim();
                    let m = lv.rows();
                    let k = g[0] as f64 / m as f64;
                    let mut gl = vec![0.0f32; lv.len()];
                    for i in 0..m {
                        let row = lv.row(i);
                        let lse = log_sum_exp(row);
                        for j in 0..n {
                            let p = (row[j] as f64 - lse).exp();
                            let t = targets.data()[i * n + j] as f64;
                            gl[i * n + j] = (k * (p - t)) as f32;
                        }
                    }
                    add_into(&mut grads, *logits, &gl);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let ga = vec![g[0] / n as f32; n];
                    add_into(&mut grads, *a, &ga);
                }
            }
        }
        Ok(())
    }

    fn elementwise_backward(
        &self,
        op: ElementwiseOp,
        a: NodeId,
        b: Option<NodeId>,
        node: &Node,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let av = self.value(a).data();
        match op {
            ElementwiseOp::Silu => {
                let ga: Vec<f32> = g
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                add_into(grads, a, &ga);
            }
            ElementwiseOp::Tanh => {
                let ga: Vec<f32> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * (1.0 - y * y))
                    .collect();
                add_into(grads, a, &ga);
            }
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => {
                let b = b.expect("binary op recorded without second operand");
                let bt = self.value(b);
                let bv = bt.data();
                let nb = bv.len();
                let broadcast = is_trailing_bias(self.value(a).shape(), bt.shape());
                let (ga, gb_full): (Vec<f32>, Vec<f32>) = match op {
                    ElementwiseOp::Add => (g.to_vec(), g.to_vec()),
                    ElementwiseOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    _ => (
                        g.iter().enumerate().map(|(i, &g)| g * bv[i % nb]).collect(),
                        g.iter().zip(av).map(|(&g, &x)| g * x).collect(),
                    ),
                };
                let gb = if broadcast {
                    let mut acc = vec![0.0f64; nb];
                    for (i, v) in gb_full.iter().enumerate() {
                        acc[i % nb] += *v as f64;
                    }
                    acc.into_iter().map(|v| v as f32).collect()
                } else {
                    gb_full
                };
                add_into(grads, a, &ga);
                add_into(grads, b, &gb);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f32>>], id: NodeId, g: &[f32]) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn row_norm(row: &[f32]) -> f32 {
    let s: f64 = row.iter().map(|&v| v as f64 * v as f64).sum();
    (s.sqrt() as f32).max(NORM_FLOOR)
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + s.ln()
}
