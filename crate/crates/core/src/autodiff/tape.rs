use std::collections::BTreeMap;

use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`]. Ids are assigned in creation order, so a
/// node's parents always carry smaller ids than the node itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags accepted by [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    /// Multiply by `constants[0]`.
    Scale,
    Neg,
    Tanh,
    Log,
    Exp,
    Sqrt,
    SqNorm,
    Sum,
    Mean,
    Relu,
    Sigmoid,
    Softmax,
    /// Clamp to `[constants[0], constants[1]]`.
    Clamp,
    StopGradient,
    /// Flatten and stack all inputs into one column vector.
    Concat,
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    SqNorm(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Clamp(NodeId, f64, f64),
    StopGradient(NodeId),
    Concat(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Scale(..) => "scale",
            Op::Neg(..) => "neg",
            Op::Tanh(..) => "tanh",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::SqNorm(..) => "sq_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Clamp(..) => "clamp",
            Op::StopGradient(..) => "stop_gradient",
            Op::Concat(..) => "concat",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Param | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Clamp(a, _, _) => vec![*a],
            Op::Neg(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::SqNorm(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::StopGradient(a) => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Append-only record of eagerly evaluated operations, replayed in reverse
/// to accumulate adjoints.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Tensor>>,
    leaf_ids: Vec<NodeId>,
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    if a == b || b.is_scalar() {
        Ok(a)
    } else if a.is_scalar() {
        Ok(b)
    } else {
        Err(Error::ShapeMismatch { op, lhs: a, rhs: b })
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaves in creation order.
    pub fn leaf_ids(&self) -> &[NodeId] {
        &self.leaf_ids
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    /// Adjoint accumulated by the last [`Tape::backward`]; zeros if the node
    /// was not reached.
    pub fn adjoint(&self, id: NodeId) -> Tensor {
        match self.adjoints.get(id.0).and_then(|a| a.as_ref()) {
            Some(a) => a.clone(),
            None => Tensor::zeros(self.shape(id)),
        }
    }

    pub fn zero_adjoints(&mut self) {
        self.adjoints.iter_mut().for_each(|a| *a = None);
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Param, value, true);
        self.leaf_ids.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.adjoints.push(None);
        id
    }

    fn push_derived(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(op, value, requires_grad)
    }

    /// Generic entry point: applies `kind` to `inputs`, evaluating eagerly.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId], constants: &[f64]) -> Result<NodeId> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
            OpKind::Concat => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Domain {
                op: "forward_op",
                msg: format!("{kind:?} expects {arity} input(s), got {}", inputs.len()),
            });
        }
        let constant = |i: usize| -> Result<f64> {
            constants.get(i).copied().ok_or(Error::Domain {
                op: "forward_op",
                msg: format!("{kind:?} expects constant #{i}"),
            })
        };
        match kind {
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Div => self.div(inputs[0], inputs[1]),
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Scale => Ok(self.scale(inputs[0], constant(0)?)),
            OpKind::Neg => Ok(self.neg(inputs[0])),
            OpKind::Tanh => Ok(self.tanh(inputs[0])),
            OpKind::Log => self.log(inputs[0]),
            OpKind::Exp => Ok(self.exp(inputs[0])),
            OpKind::Sqrt => self.sqrt(inputs[0]),
            OpKind::SqNorm => Ok(self.sq_norm(inputs[0])),
            OpKind::Sum => Ok(self.sum(inputs[0])),
            OpKind::Mean => Ok(self.mean(inputs[0])),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            OpKind::Softmax => Ok(self.softmax(inputs[0])),
            OpKind::Clamp => self.clamp(inputs[0], constant(0)?, constant(1)?),
            OpKind::StopGradient => Ok(self.stop_gradient(inputs[0])),
            OpKind::Concat => self.concat(inputs),
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let data = (0..shape.len()).map(|i| f(at(va, i), at(vb, i))).collect();
        Ok(self.push_derived(op, Tensor::new(shape, data)))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.nodes[a.0].value.map(f);
        self.push_derived(op, value)
    }

    /// Elementwise sum; a 1x1 operand broadcasts against the other.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[b.0].value.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.cols != sb.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (va.data(), vb.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(self.push_derived(Op::MatMul(a, b), Tensor::matrix(m, n, out)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Natural log. Inputs must be strictly positive; add any epsilon guard
    /// explicitly before calling.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.nodes[a.0].value.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {v}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.nodes[a.0].value.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("negative input {v}"),
            });
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    /// Sum of squared entries, as a scalar.
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sq_norm();
        self.push_derived(Op::SqNorm(a), Tensor::scalar(v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.data().iter().sum();
        self.push_derived(Op::Sum(a), Tensor::scalar(v))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_derived(Op::Mean(a), Tensor::scalar(v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Softmax over all entries of `a`.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let value = softmax_tensor(&self.nodes[a.0].value);
        self.push_derived(Op::Softmax(a), value)
    }

    /// Clamp to `[lo, hi]`. Gradient is 1 on the closed interval and 0
    /// outside it.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::Domain {
                op: "clamp",
                msg: format!("empty interval [{lo}, {hi}]"),
            });
        }
        Ok(self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi)))
    }

    /// Copies the value; no adjoint flows back to `a`.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.push(Op::StopGradient(a), value, false)
    }

    /// Flattens every input and stacks them into a single column vector.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Domain {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let data: Vec<f64> = inputs
            .iter()
            .flat_map(|id| self.nodes[id.0].value.data().iter().copied())
            .collect();
        Ok(self.push_derived(Op::Concat(inputs.to_vec()), Tensor::vector(data)))
    }

    /// Reverse sweep from a scalar `root`. Adjoints from any previous sweep
    /// are discarded first.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if !root_shape.is_scalar() {
            return Err(Error::NonScalarRoot(root_shape));
        }
        self.zero_adjoints();
        self.adjoints[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.adjoints[idx].take() else {
                continue;
            };
            Sweep {
                nodes: &self.nodes,
                adjoints: &mut self.adjoints,
            }
            .propagate(idx, &g);
            self.adjoints[idx] = Some(g);
        }

        let map = self
            .leaf_ids
            .iter()
            .map(|&id| (id, self.adjoint(id)))
            .collect();
        Ok(Gradients { map })
    }

}

/// Reverse-sweep state: immutable node values plus mutable adjoint slots.
struct Sweep<'a> {
    nodes: &'a [Node],
    adjoints: &'a mut [Option<Tensor>],
}

impl Sweep<'_> {
    fn accumulate(&mut self, target: NodeId, contrib: impl FnOnce(Shape) -> Tensor) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let shape = node.value.shape();
        let c = contrib(shape);
        debug_assert_eq!(c.shape(), shape);
        match &mut self.adjoints[target.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(c.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(c),
        }
    }

    /// Accumulate `per_elem(i)` for each output element into `target`,
    /// summing when `target` is a broadcast scalar.
    fn accumulate_elementwise(&mut self, target: NodeId, n_out: usize, per_elem: impl Fn(usize) -> f64) {
        self.accumulate(target, |shape| {
            if shape.len() == n_out {
                Tensor::new(shape, (0..n_out).map(&per_elem).collect())
            } else {
                Tensor::scalar((0..n_out).map(&per_elem).sum())
            }
        });
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let nodes = self.nodes;
        let op = &nodes[idx].op;
        let out = &nodes[idx].value;
        let gd = g.data();
        let n = gd.len();
        match *op {
            Op::Param | Op::Constant | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                self.accumulate_elementwise(a, n, |i| gd[i]);
                self.accumulate_elementwise(b, n, |i| gd[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate_elementwise(a, n, |i| gd[i]);
                self.accumulate_elementwise(b, n, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                self.accumulate_elementwise(a, n, |i| gd[i] * at(vb, i));
                self.accumulate_elementwise(b, n, |i| gd[i] * at(va, i));
            }
            Op::Div(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                self.accumulate_elementwise(a, n, |i| gd[i] / at(vb, i));
                self.accumulate_elementwise(b, n, |i| {
                    let d = at(vb, i);
                    -gd[i] * at(va, i) / (d * d)
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (va.shape().rows, va.shape().cols);
                let nn = vb.shape().cols;
                // dA = G B^T
                self.accumulate(a, |shape| {
                    let mut d = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..nn {
                                s += gd[i * nn + j] * vb.data()[p * nn + j];
                            }
                            d[i * k + p] = s;
                        }
                    }
                    Tensor::new(shape, d)
                });
                // dB = A^T G
                self.accumulate(b, |shape| {
                    let mut d = vec![0.0; k * nn];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..nn {
                                d[p * nn + j] += aip * gd[i * nn + j];
                            }
                        }
                    }
                    Tensor::new(shape, d)
                });
            }
            Op::Scale(a, c) => self.accumulate_elementwise(a, n, |i| c * gd[i]),
            Op::Neg(a) => self.accumulate_elementwise(a, n, |i| -gd[i]),
            Op::Tanh(a) => {
                let y = out.data();
                self.accumulate_elementwise(a, n, |i| gd[i] * (1.0 - y[i] * y[i]));
            }
            Op::Log(a) => {
                let x = &nodes[a.0].value;
                self.accumulate_elementwise(a, n, |i| gd[i] / x.data()[i]);
            }
            Op::Exp(a) => {
                let y = out.data();
                self.accumulate_elementwise(a, n, |i| gd[i] * y[i]);
            }
            Op::Sqrt(a) => {
                let y = out.data();
                self.accumulate_elementwise(a, n, |i| gd[i] / (2.0 * y[i]));
            }
            Op::SqNorm(a) => {
                let x = &nodes[a.0].value;
                let g0 = gd[0];
                self.accumulate(a, |shape| Tensor::new(shape, x.data().iter().map(|v| 2.0 * v * g0).collect()));
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(a, |shape| Tensor::filled(shape, g0));
            }
            Op::Mean(a) => {
                let g0 = gd[0];
                self.accumulate(a, |shape| Tensor::filled(shape, g0 / shape.len() as f64));
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                self.accumulate_elementwise(a, n, |i| if x.data()[i] > 0.0 { gd[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.accumulate_elementwise(a, n, |i| gd[i] * y[i] * (1.0 - y[i]));
            }
            Op::Softmax(a) => {
                let y = out.data();
                let dot: f64 = gd.iter().zip(y).map(|(g, y)| g * y).sum();
                self.accumulate_elementwise(a, n, |i| y[i] * (gd[i] - dot));
            }
            Op::Clamp(a, lo, hi) => {
                let x = &nodes[a.0].value;
                self.accumulate_elementwise(a, n, |i| {
                    let v = x.data()[i];
                    if (lo..=hi).contains(&v) {
                        gd[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Concat(ref inputs) => {
                let mut offset = 0;
                for &id in inputs {
                    let len = nodes[id.0].value.len();
                    let start = offset;
                    self.accumulate(id, |shape| Tensor::new(shape, gd[start..start + len].to_vec()));
                    offset += len;
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_tensor(t: &Tensor) -> Tensor {
    let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::new(t.shape(), exps.into_iter().map(|e| e / total).collect())
}
