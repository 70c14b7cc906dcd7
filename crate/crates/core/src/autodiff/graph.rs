use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::params::{Gradients, ParamStore};
use super::tensor::{self, Tensor};
use super::AdError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on a graph node.
#[derive(Debug, Clone)]
pub enum Op {
    Param(usize),
    Input,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Square,
    Sigmoid,
    Tanh,
    Softplus,
    Relu,
    /// Along the last axis.
    Softmax,
    Sum,
    Mean,
    SumTo(Vec<usize>),
    Broadcast(Vec<usize>),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Transpose,
    GatherRows(Rc<[usize]>),
    ScatterRows {
        index: Rc<[usize]>,
        rows: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumTo(_) => "sum_to",
            Op::Broadcast(_) => "broadcast",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::GatherRows(_) => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Param(_) | Op::Input | Op::Constant)
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<NodeId>,
    pub(crate) value: Tensor,
    pub(crate) needs_grad: bool,
}

impl Node {
    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Define-by-run computation graph. Nodes are appended in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_ids: Vec<String>,
    param_nodes: HashMap<String, NodeId>,
}

/// Per-node adjoints from a reverse sweep.
#[derive(Debug)]
pub struct Adjoints {
    adjoints: Vec<Option<Tensor>>,
    grads: Gradients,
}

impl Adjoints {
    /// Adjoint of `node`; zero-shaped like the node value when unreached.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.adjoints.get(node.0).and_then(|a| a.as_ref())
    }

    pub fn gradients(&self) -> &Gradients {
        &self.grads
    }

    pub fn into_gradients(self) -> Gradients {
        self.grads
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<NodeId, AdError> {
        if let Some(&node) = self.param_nodes.get(id) {
            return Ok(node);
        }
        let p = store.get(id).ok_or_else(|| AdError::UnknownParameter(id.to_string()))?;
        let k = self.param_ids.len();
        self.param_ids.push(id.to_string());
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param(k),
            parents: Vec::new(),
            value: p.tensor.clone(),
            needs_grad: p.requires_grad,
        });
        self.param_nodes.insert(id.to_string(), node);
        Ok(node)
    }

    /// Differentiable non-parameter leaf (a model input).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, value, false)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents: Vec::new(),
            value,
            needs_grad,
        });
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Div, &[a, b])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Neg, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AdError> {
        self.forward_op(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AdError> {
        self.forward_op(Op::AddScalar(c), &[a])
    }
    /// `1 - a`.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let n = self.neg(a)?;
        self.add_scalar(n, 1.0)
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Log, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Square, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Tanh, &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Softplus, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Relu, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Softmax, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Mean, &[a])
    }
    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        self.forward_op(Op::SumTo(shape.to_vec()), &[a])
    }
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.forward_op(Op::Broadcast(shape.to_vec()), &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, AdError> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.forward_op(Op::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId, AdError> {
        self.forward_op(Op::Slice { axis, start, end }, &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.forward_op(Op::Transpose, &[a])
    }
    pub fn gather_rows(&mut self, a: NodeId, index: Rc<[usize]>) -> Result<NodeId, AdError> {
        self.forward_op(Op::GatherRows(index), &[a])
    }
    pub fn scatter_rows(&mut self, a: NodeId, index: Rc<[usize]>, rows: usize) -> Result<NodeId, AdError> {
        self.forward_op(Op::ScatterRows { index, rows }, &[a])
    }

    /// `a + b` where `b` is broadcast to the shape of `a` (bias rows, scalars).
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(a, bb)
    }

    /// `a * b` where `b` is broadcast to the shape of `a`.
    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.mul(a, bb)
    }

    /// Records `op` applied to `inputs`, computing its value eagerly.
    pub fn forward_op(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, AdError> {
        if op.is_leaf() {
            return Err(AdError::Contract(format!(
                "leaf op `{}` cannot be applied to inputs",
                op.name()
            )));
        }
        for p in inputs {
            if p.0 >= self.nodes.len() {
                return Err(AdError::NotInGraph);
            }
        }
        let value = self.compute(&op, inputs)?;
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|p| self.nodes[p.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents: inputs.to_vec(),
            value,
            needs_grad,
        });
        Ok(id)
    }

    fn mismatch(&self, op: &Op, inputs: &[NodeId]) -> AdError {
        AdError::ShapeMismatch {
            op: op.name(),
            shapes: inputs.iter().map(|p| self.nodes[p.0].value.shape().to_vec()).collect(),
        }
    }

    fn arity(&self, op: &Op, inputs: &[NodeId], n: usize) -> Result<(), AdError> {
        if inputs.len() != n {
            return Err(AdError::Contract(format!(
                "`{}` expects {} inputs, got {}",
                op.name(),
                n,
                inputs.len()
            )));
        }
        Ok(())
    }

    fn compute(&self, op: &Op, inputs: &[NodeId]) -> Result<Tensor, AdError> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        match op {
            Op::Param(_) | Op::Input | Op::Constant => unreachable!(),
            Op::MatMul => {
                self.arity(op, inputs, 2)?;
                let (a, b) = (v(0), v(1));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.mismatch(op, inputs));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Ok(Tensor::from_parts(
                    vec![m, n],
                    tensor::matmul(a.data(), b.data(), m, k, n),
                ))
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                self.arity(op, inputs, 2)?;
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(self.mismatch(op, inputs));
                }
                Ok(match op {
                    Op::Add => a.zip(b, |x, y| x + y),
                    Op::Sub => a.zip(b, |x, y| x - y),
                    Op::Mul => a.zip(b, |x, y| x * y),
                    _ => {
                        if b.data().iter().any(|&y| y == 0.0) {
                            return Err(AdError::Domain {
                                op: "div",
                                detail: "division by zero".into(),
                            });
                        }
                        a.zip(b, |x, y| x / y)
                    }
                })
            }
            Op::Neg => {
                self.arity(op, inputs, 1)?;
                Ok(v(0).map(|x| -x))
            }
            Op::Scale(c) => {
                self.arity(op, inputs, 1)?;
                let c = *c;
                Ok(v(0).map(|x| c * x))
            }
            Op::AddScalar(c) => {
                self.arity(op, inputs, 1)?;
                let c = *c;
                Ok(v(0).map(|x| x + c))
            }
            Op::Exp => {
                self.arity(op, inputs, 1)?;
                Ok(v(0).map(f64::exp))
            }
            Op::Log => {
                self.arity(op, inputs, 1)?;
                if let Some(bad) = v(0).data().iter().find(|&&x| x <= 0.0) {
                    return Err(AdError::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                Ok(v(0).map(f64::ln))
            }
            Op::Square => {
                self.arity(op, inputs, 1)?;
                Ok(v(0).map(|x| x * x))
            }
            Op::Sigmoid => {
                self.arity(op, inputs, 1)?;
                Ok(v(0).map(tensor::sigmoid))
            }
            Op::Tanh => {
                self.arity(op, inputs, 1)?;
                Ok(v(0).map(f64::tanh))
            }
            Op::Softplus => {
                self.arity(op, inputs, 1)?;
                Ok(v(0).map(tensor::softplus))
            }
            Op::Relu => {
                self.arity(op, inputs, 1)?;
                Ok(v(0).map(|x| if x > 0.0 { x } else { 0.0 }))
            }
            Op::Softmax => {
                self.arity(op, inputs, 1)?;
                let a = v(0);
                let (r, c) = a.dims2();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = &a.data()[i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    out.extend(e.into_iter().map(|x| x / s));
                }
                Ok(Tensor::from_parts(a.shape().to_vec(), out))
            }
            Op::Sum | Op::Mean => {
                self.arity(op, inputs, 1)?;
                let a = v(0);
                let s: f64 = a.data().iter().sum();
                Ok(Tensor::scalar(if matches!(op, Op::Mean) {
                    s / a.numel() as f64
                } else {
                    s
                }))
            }
            Op::SumTo(shape) => {
                self.arity(op, inputs, 1)?;
                let a = v(0);
                let data = tensor::sum_to_data(a.data(), a.shape(), shape).ok_or_else(|| self.mismatch(op, inputs))?;
                Ok(Tensor::from_parts(shape.clone(), data))
            }
            Op::Broadcast(shape) => {
                self.arity(op, inputs, 1)?;
                let a = v(0);
                let data =
                    tensor::broadcast_data(a.data(), a.shape(), shape).ok_or_else(|| self.mismatch(op, inputs))?;
                Ok(Tensor::from_parts(shape.clone(), data))
            }
            Op::Concat(axis) => {
                if inputs.is_empty() {
                    return Err(AdError::Contract("concat of nothing".into()));
                }
                let first = v(0).shape().to_vec();
                let rank = first.len();
                if rank == 0 || *axis >= rank {
                    return Err(self.mismatch(op, inputs));
                }
                let mut total = 0;
                for i in 0..inputs.len() {
                    let s = v(i).shape();
                    if s.len() != rank || (0..rank).any(|d| d != *axis && s[d] != first[d]) {
                        return Err(self.mismatch(op, inputs));
                    }
                    total += s[*axis];
                }
                let mut shape = first.clone();
                shape[*axis] = total;
                let data = if rank == 1 || *axis == 0 {
                    inputs
                        .iter()
                        .flat_map(|p| self.nodes[p.0].value.data().iter().cloned())
                        .collect()
                } else {
                    let rows = first[0];
                    let mut out = Vec::with_capacity(rows * total);
                    for r in 0..rows {
                        for p in inputs {
                            out.extend_from_slice(self.nodes[p.0].value.row(r));
                        }
                    }
                    out
                };
                Ok(Tensor::from_parts(shape, data))
            }
            Op::Slice { axis, start, end } => {
                self.arity(op, inputs, 1)?;
                let a = v(0);
                let rank = a.rank();
                if rank == 0 || *axis >= rank || start >= end || *end > a.shape()[*axis] {
                    return Err(self.mismatch(op, inputs));
                }
                let mut shape = a.shape().to_vec();
                shape[*axis] = end - start;
                let data = if rank == 1 {
                    a.data()[*start..*end].to_vec()
                } else if *axis == 0 {
                    let c = a.shape()[1];
                    a.data()[start * c..end * c].to_vec()
                } else {
                    let (r, _) = a.dims2();
                    let mut out = Vec::with_capacity(r * (end - start));
                    for i in 0..r {
                        out.extend_from_slice(&a.row(i)[*start..*end]);
                    }
                    out
                };
                Ok(Tensor::from_parts(shape, data))
            }
            Op::Transpose => {
                self.arity(op, inputs, 1)?;
                let a = v(0);
                if a.rank() != 2 {
                    return Err(self.mismatch(op, inputs));
                }
                Ok(transpose(a))
            }
            Op::GatherRows(index) => {
                self.arity(op, inputs, 1)?;
                let a = v(0);
                if a.rank() != 2 || index.is_empty() || index.iter().any(|&i| i >= a.shape()[0]) {
                    return Err(self.mismatch(op, inputs));
                }
                let c = a.shape()[1];
                let mut out = Vec::with_capacity(index.len() * c);
                for &i in index.iter() {
                    out.extend_from_slice(a.row(i));
                }
                Ok(Tensor::from_parts(vec![index.len(), c], out))
            }
            Op::ScatterRows { index, rows } => {
                self.arity(op, inputs, 1)?;
                let a = v(0);
                if a.rank() != 2 || a.shape()[0] != index.len() || index.iter().any(|&i| i >= *rows) {
                    return Err(self.mismatch(op, inputs));
                }
                let c = a.shape()[1];
                let mut out = vec![0.0; rows * c];
                for (k, &i) in index.iter().enumerate() {
                    for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(a.row(k)) {
                        *o += x;
                    }
                }
                Ok(Tensor::from_parts(vec![*rows, c], out))
            }
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AdError> {
        Ok(self.backward_full(root)?.into_gradients())
    }

    /// Reverse sweep returning every node adjoint alongside parameter gradients.
    pub fn backward_full(&self, root: NodeId) -> Result<Adjoints, AdError> {
        if root.0 >= self.nodes.len() {
            return Err(AdError::NotInGraph);
        }
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(AdError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::ones(rv.shape()));
        let mut grads = BTreeMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(k) = node.op {
                if node.needs_grad {
                    grads.insert(self.param_ids[k].clone(), g.clone());
                }
                adj[i] = Some(g);
                continue;
            }
            if !node.op.is_leaf() {
                for (slot, contrib) in self.vjp(node, &g) {
                    let p = node.parents[slot];
                    if !self.nodes[p.0].needs_grad {
                        continue;
                    }
                    match &mut adj[p.0] {
                        Some(acc) => acc.add_assign(&contrib),
                        empty => *empty = Some(contrib),
                    }
                }
            }
            adj[i] = Some(g);
        }
        Ok(Adjoints {
            adjoints: adj,
            grads: Gradients::from_map(grads),
        })
    }

    /// Numeric vector-Jacobian products for each parent slot needing a gradient.
    fn vjp(&self, node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
        let pv = |slot: usize| &self.nodes[node.parents[slot].0].value;
        let wants = |slot: usize| self.nodes[node.parents[slot].0].needs_grad;
        let y = &node.value;
        let mut out = Vec::with_capacity(node.parents.len());
        match &node.op {
            Op::Param(_) | Op::Input | Op::Constant => {}
            Op::MatMul => {
                let (a, b) = (pv(0), pv(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if wants(0) {
                    out.push((
                        0,
                        Tensor::from_parts(vec![m, k], tensor::matmul_nt(g.data(), b.data(), m, n, k)),
                    ));
                }
                if wants(1) {
                    out.push((
                        1,
                        Tensor::from_parts(vec![k, n], tensor::matmul_tn(a.data(), g.data(), m, k, n)),
                    ));
                }
            }
            Op::Add => {
                if wants(0) {
                    out.push((0, g.clone()));
                }
                if wants(1) {
                    out.push((1, g.clone()));
                }
            }
            Op::Sub => {
                if wants(0) {
                    out.push((0, g.clone()));
                }
                if wants(1) {
                    out.push((1, g.map(|x| -x)));
                }
            }
            Op::Mul => {
                if wants(0) {
                    out.push((0, g.zip(pv(1), |a, b| a * b)));
                }
                if wants(1) {
                    out.push((1, g.zip(pv(0), |a, b| a * b)));
                }
            }
            Op::Div => {
                let b = pv(1);
                if wants(0) {
                    out.push((0, g.zip(b, |gv, bv| gv / bv)));
                }
                if wants(1) {
                    let gy = g.zip(y, |gv, yv| gv * yv);
                    out.push((1, gy.zip(b, |v, bv| -v / bv)));
                }
            }
            Op::Neg => out.push((0, g.map(|x| -x))),
            Op::Scale(c) => {
                let c = *c;
                out.push((0, g.map(|x| c * x)));
            }
            Op::AddScalar(_) => out.push((0, g.clone())),
            Op::Exp => out.push((0, g.zip(y, |a, b| a * b))),
            Op::Log => out.push((0, g.zip(pv(0), |a, x| a / x))),
            Op::Square => out.push((0, g.zip(pv(0), |a, x| 2.0 * x * a))),
            Op::Sigmoid => out.push((0, g.zip(y, |a, s| a * s * (1.0 - s)))),
            Op::Tanh => out.push((0, g.zip(y, |a, t| a * (1.0 - t * t)))),
            Op::Softplus => out.push((0, g.zip(pv(0), |a, x| a * tensor::sigmoid(x)))),
            Op::Relu => out.push((0, g.zip(pv(0), |a, x| if x > 0.0 { a } else { 0.0 }))),
            Op::Softmax => {
                let (r, c) = y.dims2();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                out.push((0, Tensor::from_parts(y.shape().to_vec(), data)));
            }
            Op::Sum | Op::Mean => {
                let p = pv(0);
                let gv = g.data()[0];
                let v = if matches!(node.op, Op::Mean) {
                    gv / p.numel() as f64
                } else {
                    gv
                };
                out.push((0, Tensor::full(p.shape(), v)));
            }
            Op::SumTo(_) => {
                let p = pv(0);
                let data =
                    tensor::broadcast_data(g.data(), g.shape(), p.shape()).expect("sum_to shapes validated on forward");
                out.push((0, Tensor::from_parts(p.shape().to_vec(), data)));
            }
            Op::Broadcast(_) => {
                let p = pv(0);
                let data =
                    tensor::sum_to_data(g.data(), g.shape(), p.shape()).expect("broadcast shapes validated on forward");
                out.push((0, Tensor::from_parts(p.shape().to_vec(), data)));
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                for slot in 0..node.parents.len() {
                    let width = pv(slot).shape()[*axis];
                    if wants(slot) {
                        out.push((slot, slice_tensor(g, *axis, offset, offset + width)));
                    }
                    offset += width;
                }
            }
            Op::Slice { axis, start, end } => {
                let p = pv(0);
                out.push((0, embed_slice(g, p.shape(), *axis, *start, *end)));
            }
            Op::Transpose => out.push((0, transpose(g))),
            Op::GatherRows(index) => {
                let rows = pv(0).shape()[0];
                let c = g.shape()[1];
                let mut data = vec![0.0; rows * c];
                for (k, &i) in index.iter().enumerate() {
                    for (o, x) in data[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                out.push((0, Tensor::from_parts(vec![rows, c], data)));
            }
            Op::ScatterRows { index, .. } => {
                let c = g.shape()[1];
                let mut data = Vec::with_capacity(index.len() * c);
                for &i in index.iter() {
                    data.extend_from_slice(g.row(i));
                }
                out.push((0, Tensor::from_parts(vec![index.len(), c], data)));
            }
        }
        out
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

pub(crate) fn slice_tensor(a: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[axis] = end - start;
    let data = if a.rank() == 1 {
        a.data()[start..end].to_vec()
    } else if axis == 0 {
        let c = a.shape()[1];
        a.data()[start * c..end * c].to_vec()
    } else {
        let r = a.shape()[0];
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&a.row(i)[start..end]);
        }
        out
    };
    Tensor::from_parts(shape, data)
}

fn embed_slice(g: &Tensor, full: &[usize], axis: usize, start: usize, end: usize) -> Tensor {
    let mut out = Tensor::zeros(full);
    if full.len() == 1 {
        out.data_mut()[start..end].copy_from_slice(g.data());
    } else if axis == 0 {
        let c = full[1];
        out.data_mut()[start * c..end * c].copy_from_slice(g.data());
    } else {
        let (r, c) = (full[0], full[1]);
        let w = end - start;
        for i in 0..r {
            out.data_mut()[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
        }
    }
    out
}
