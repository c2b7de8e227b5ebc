//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output value and
//! whatever it needs for the backward pass. Nodes are stored in creation
//! order, which is a topological order, so `backward` is a single reverse
//! sweep that visits each node once. Reductions run in a fixed order, so
//! forward and backward results are bitwise reproducible.
//!
//! Broadcasting is limited to scalar operands of `add`/`sub`; adding a bias
//! row to a matrix is the explicit `add_bias` op.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Lower clamp applied to `q` inside the KL divergence.
pub const KL_Q_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Sub,
    Mul,
    ScalarMul,
    Relu,
    ConcatLastAxis,
    ReduceMean,
    ReduceSum,
    SoftmaxLastAxis,
    LogSoftmaxLastAxis,
    LayerNormLastAxis,
    CrossEntropy,
    KlDivergence,
    MaxLastAxis,
    MaskedScale,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::Relu => "relu",
            OpKind::ConcatLastAxis => "concat_last_axis",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::SoftmaxLastAxis => "softmax_last_axis",
            OpKind::LogSoftmaxLastAxis => "log_softmax_last_axis",
            OpKind::LayerNormLastAxis => "layer_norm_last_axis",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::KlDivergence => "kl_divergence",
            OpKind::MaxLastAxis => "max_last_axis",
            OpKind::MaskedScale => "masked_scale",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Relu(Var),
    Concat(Vec<Var>),
    Mean(Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    // saved: per-row inverse standard deviation
    LayerNorm { x: Var, inv_std: Vec<f64> },
    // saved: softmax of the logits
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Kl(Var, Var),
    MaxLast { x: Var, argmax: Vec<usize> },
    MaskedScale(Var, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the parameter leaves.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Var>,
}

impl Gradients {
    /// Gradient for `v`; leaves the loss does not reach get a zero tensor.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// All parameter leaves of the graph, in creation order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

fn mismatch(op: OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = math::exp(v - max);
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| math::exp(v - max)).sum();
        let lse = max + math::ln(sum);
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf; receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, param: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: param,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch(OpKind::MatMul, ta, tb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let sign = if kind == OpKind::Sub { -1.0 } else { 1.0 };
        let value = if ta.same_shape(tb) {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x + sign * y)
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| x + sign * y)
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| x + sign * y)
        } else {
            return Err(mismatch(kind, ta, tb));
        };
        let op = if kind == OpKind::Sub {
            Op::Sub(a, b)
        } else {
            Op::Add(a, b)
        };
        Ok(self.push(op, value, &[a, b]))
    }

    /// Elementwise sum; one operand may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b)
    }

    /// Elementwise difference; one operand may be a scalar.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b)
    }

    /// Adds the vector `bias` (length n) to every row of `x` (`[m, n]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tb.len() != tx.last_dim() {
            return Err(mismatch(OpKind::AddBias, tx, tb));
        }
        let n = tb.len();
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias(x, bias), value, &[x, bias]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(mismatch(OpKind::Mul, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| c * v);
        self.push(Op::ScalarMul(x, c), value, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), value, &[x])
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat_last_axis(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or(Error::EmptyAxis {
                op: OpKind::ConcatLastAxis,
            })?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &v in xs {
            let t = self.value(v);
            let s = t.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch(OpKind::ConcatLastAxis, self.value(*first), t));
            }
            total += t.last_dim();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat(xs.to_vec()), value, xs))
    }

    /// Mean over all elements, giving a scalar.
    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum();
        let value = Tensor::scalar(s / t.len() as f64);
        self.push(Op::Mean(x), value, &[x])
    }

    /// Sum over all elements, giving a scalar.
    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    fn check_last_axis(&self, kind: OpKind, x: Var) -> Result<()> {
        if self.value(x).shape().is_empty() {
            return Err(Error::EmptyAxis { op: kind });
        }
        Ok(())
    }

    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        self.check_last_axis(OpKind::SoftmaxLastAxis, x)?;
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), t.last_dim()))?;
        Ok(self.push(Op::Softmax(x), value, &[x]))
    }

    pub fn log_softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        self.check_last_axis(OpKind::LogSoftmaxLastAxis, x)?;
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), log_softmax_rows(t.data(), t.last_dim()))?;
        Ok(self.push(Op::LogSoftmax(x), value, &[x]))
    }

    /// Normalizes each row to zero mean and unit variance:
    /// `(x - mean) / sqrt(var + eps)` with the population variance. No
    /// affine parameters.
    pub fn layer_norm_last_axis(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check_last_axis(OpKind::LayerNormLastAxis, x)?;
        let t = self.value(x);
        let c = t.last_dim();
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(t.rows());
        for (row, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / math::sqrt(var + eps);
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(Op::LayerNorm { x, inv_std }, value, &[x]))
    }

    /// Mean negative log-likelihood of integer `labels` under softmax of
    /// `logits` (`[B, C]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: OpKind::CrossEntropy,
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        if b != labels.len() {
            return Err(Error::ShapeMismatch {
                op: OpKind::CrossEntropy,
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let logp = log_softmax_rows(t.data(), c);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total -= logp[i * c + y];
        }
        let probs = logp.iter().map(|&v| math::exp(v)).collect();
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            &[logits],
        ))
    }

    /// Row-averaged `KL(p || q) = sum p (ln p - ln q)`.
    ///
    /// Terms with `p == 0` contribute zero and `q` is clamped below at
    /// [`KL_Q_FLOOR`]. Rank-1 inputs are a single row.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if !tp.same_shape(tq) {
            return Err(mismatch(OpKind::KlDivergence, tp, tq));
        }
        self.check_last_axis(OpKind::KlDivergence, p)?;
        let total: f64 = tp
            .data()
            .iter()
            .zip(tq.data())
            .map(|(&pv, &qv)| kl_term(pv, qv))
            .sum();
        let value = Tensor::scalar(total / tp.rows() as f64);
        Ok(self.push(Op::Kl(p, q), value, &[p, q]))
    }

    /// Row-wise maximum over the last axis; ties resolve to the first index.
    pub fn max_last_axis(&mut self, x: Var) -> Result<Var> {
        self.check_last_axis(OpKind::MaxLastAxis, x)?;
        let t = self.value(x);
        let c = t.last_dim();
        let mut argmax = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.rows());
        for row in t.data().chunks(c) {
            let j = argmax_first(row);
            argmax.push(j);
            out.push(row[j]);
        }
        let shape = if t.shape().len() > 1 {
            t.shape()[..t.shape().len() - 1].to_vec()
        } else {
            Vec::new()
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MaxLast { x, argmax }, value, &[x]))
    }

    /// Multiplies `x` by a gate `m` that must be exactly 0 or 1.
    pub fn masked_scale(&mut self, x: Var, m: f64) -> Result<Var> {
        if m != 0.0 && m != 1.0 {
            return Err(Error::InvalidMask { value: m });
        }
        let value = self.value(x).map(|v| m * v);
        Ok(self.push(Op::MaskedScale(x, m), value, &[x]))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 || lt.shape().len() > 1 {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if node.param {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let params: Vec<Var> = (0..n)
            .filter(|&i| self.nodes[i].param)
            .map(Var)
            .collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(g) if self.nodes[i].param => {
                    Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let bd = tb.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let brow = &bd[p * nn..(p + 1) * nn];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    let ad = ta.data();
                    let mut db = vec![0.0; k * nn];
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            let drow = &mut db[p * nn..(p + 1) * nn];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !needs(v) {
                        continue;
                    }
                    let t = self.value(v);
                    if t.len() == g.len() {
                        let d: Vec<f64> = g.iter().map(|x| s * x).collect();
                        accumulate(grads, v, &d);
                    } else {
                        let total: f64 = g.iter().sum();
                        accumulate(grads, v, &[s * total]);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(grads, *x, g);
                }
                if needs(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let o = self.value(other).data();
                        let d: Vec<f64> = g.iter().zip(o).map(|(x, y)| x * y).collect();
                        accumulate(grads, v, &d);
                    }
                }
            }
            Op::ScalarMul(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| c * v).collect();
                accumulate(grads, *x, &d);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Concat(xs) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &v in xs {
                    let w = self.value(v).last_dim();
                    if needs(v) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, v, &d);
                    }
                    offset += w;
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / n as f64; n];
                accumulate(grads, *x, &d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0]; n];
                accumulate(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let gs: f64 = gr.iter().sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = gv - math::exp(yv) * gs;
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let cf = c as f64;
                let mut d = vec![0.0; y.len()];
                for (r, ((yr, gr), dr)) in y
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(d.chunks_mut(c))
                    .enumerate()
                {
                    let gmean = gr.iter().sum::<f64>() / cf;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cf;
                    // dx = s (g - mean(g) - y mean(g y)), s = 1 / sqrt(var + eps)
                    let is = inv_std[r];
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = is * (gv - gmean - yv * gy);
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let b = labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / b).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= g[0] / b;
                }
                accumulate(grads, *logits, &d);
            }
            Op::Kl(p, q) => {
                let (tp, tq) = (self.value(*p), self.value(*q));
                let scale = g[0] / tp.rows() as f64;
                if needs(*p) {
                    let d: Vec<f64> = tp
                        .data()
                        .iter()
                        .zip(tq.data())
                        .map(|(&pv, &qv)| {
                            if pv > 0.0 {
                                scale * (math::ln(pv) - math::ln(qv.max(KL_Q_FLOOR)) + 1.0)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(grads, *p, &d);
                }
                if needs(*q) {
                    let d: Vec<f64> = tp
                        .data()
                        .iter()
                        .zip(tq.data())
                        .map(|(&pv, &qv)| {
                            if pv > 0.0 && qv > KL_Q_FLOOR {
                                -scale * pv / qv
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(grads, *q, &d);
                }
            }
            Op::MaxLast { x, argmax } => {
                let t = self.value(*x);
                let c = t.last_dim();
                let mut d = vec![0.0; t.len()];
                for (r, &j) in argmax.iter().enumerate() {
                    d[r * c + j] = g[r];
                }
                accumulate(grads, *x, &d);
            }
            Op::MaskedScale(x, m) => {
                let d: Vec<f64> = g.iter().map(|v| m * v).collect();
                accumulate(grads, *x, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// `p (ln p - ln max(q, floor))` with `0 ln 0 := 0`.
pub fn kl_term(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (math::ln(p) - math::ln(q.max(KL_Q_FLOOR)))
    } else {
        0.0
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}
