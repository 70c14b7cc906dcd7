//! Derivative graphs: the adjoint of a root with respect to one input leaf,
//! expressed as ordinary graph nodes so that it can itself be differentiated
//! by [`Graph::backward`].

use super::graph::{Graph, NodeId, Op};
use super::tensor::Tensor;
use super::AdError;

impl Graph {
    /// Builds `d root / d input` as a new node with the shape of `input`.
    ///
    /// Nodes that do not depend on `input` are treated as constants of the
    /// derivative, but remain connected to their own parents, so a later
    /// `backward` over the returned node yields mixed second derivatives.
    pub fn grad_wrt_input(&mut self, root: NodeId, input: NodeId) -> Result<NodeId, AdError> {
        let (r, x) = (root.index(), input.index());
        if r >= self.len() || x > r {
            return Err(AdError::NotInGraph);
        }
        let root_shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 {
            return Err(AdError::NonScalarRoot { shape: root_shape });
        }

        let mut depends = vec![false; r + 1];
        depends[x] = true;
        for i in x + 1..=r {
            depends[i] = self.nodes()[i].parents.iter().any(|p| depends[p.index()]);
        }
        if !depends[r] {
            return Err(AdError::NotInGraph);
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; r + 1];
        adj[r] = Some(self.constant(Tensor::ones(&root_shape)));
        for i in (x + 1..=r).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let parents = self.nodes()[i].parents.clone();
            for (slot, p) in parents.iter().enumerate() {
                if !depends[p.index()] {
                    continue;
                }
                let c = self.symbolic_vjp(NodeId(i), slot, g)?;
                adj[p.index()] = Some(match adj[p.index()] {
                    Some(acc) => self.add(acc, c)?,
                    None => c,
                });
            }
        }
        Ok(adj[x].expect("input reachable from root"))
    }

    fn symbolic_vjp(&mut self, node: NodeId, slot: usize, g: NodeId) -> Result<NodeId, AdError> {
        let op = self.node(node).op().clone();
        let parents = self.node(node).parents().to_vec();
        let p = |k: usize| parents[k];
        match op {
            Op::Param(_) | Op::Input | Op::Constant => unreachable!("leaves have no parents"),
            Op::MatMul => {
                if slot == 0 {
                    let bt = self.transpose(p(1))?;
                    self.matmul(g, bt)
                } else {
                    let at = self.transpose(p(0))?;
                    self.matmul(at, g)
                }
            }
            Op::Add => Ok(g),
            Op::Sub => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.neg(g)
                }
            }
            Op::Mul => self.mul(g, p(1 - slot)),
            Op::Div => {
                if slot == 0 {
                    self.div(g, p(1))
                } else {
                    let gy = self.mul(g, node)?;
                    let q = self.div(gy, p(1))?;
                    self.neg(q)
                }
            }
            Op::Neg => self.neg(g),
            Op::Scale(c) => self.scale(g, c),
            Op::AddScalar(_) => Ok(g),
            Op::Exp => self.mul(g, node),
            Op::Log => self.div(g, p(0)),
            Op::Square => {
                let gx = self.mul(g, p(0))?;
                self.scale(gx, 2.0)
            }
            Op::Sigmoid => {
                let one_minus = self.one_minus(node)?;
                let d = self.mul(node, one_minus)?;
                self.mul(g, d)
            }
            Op::Tanh => {
                let sq = self.square(node)?;
                let d = self.one_minus(sq)?;
                self.mul(g, d)
            }
            Op::Softplus => {
                let s = self.sigmoid(p(0))?;
                self.mul(g, s)
            }
            Op::Relu => {
                let step = self.value(p(0)).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let step = self.constant(step);
                self.mul(g, step)
            }
            Op::Softmax => {
                let shape = self.shape(node).to_vec();
                let gy = self.mul(g, node)?;
                let reduced: Vec<usize> = match shape.as_slice() {
                    [r, _] => vec![*r, 1],
                    _ => Vec::new(),
                };
                let s = self.sum_to(gy, &reduced)?;
                let sb = self.broadcast(s, &shape)?;
                let centered = self.sub(g, sb)?;
                self.mul(node, centered)
            }
            Op::Sum => {
                let shape = self.shape(p(0)).to_vec();
                self.broadcast(g, &shape)
            }
            Op::Mean => {
                let shape = self.shape(p(0)).to_vec();
                let n = self.value(p(0)).numel() as f64;
                let b = self.broadcast(g, &shape)?;
                self.scale(b, 1.0 / n)
            }
            Op::SumTo(_) => {
                let shape = self.shape(p(0)).to_vec();
                self.broadcast(g, &shape)
            }
            Op::Broadcast(_) => {
                let shape = self.shape(p(0)).to_vec();
                self.sum_to(g, &shape)
            }
            Op::Concat(axis) => {
                let offset: usize = parents[..slot].iter().map(|q| self.shape(*q)[axis]).sum();
                let width = self.shape(p(slot))[axis];
                self.slice(g, axis, offset, offset + width)
            }
            Op::Slice { axis, start, end } => {
                let full = self.shape(p(0)).to_vec();
                let mut parts = Vec::with_capacity(3);
                if start > 0 {
                    let mut s = full.clone();
                    s[axis] = start;
                    parts.push(self.constant(Tensor::zeros(&s)));
                }
                parts.push(g);
                if end < full[axis] {
                    let mut s = full.clone();
                    s[axis] = full[axis] - end;
                    parts.push(self.constant(Tensor::zeros(&s)));
                }
                self.concat(&parts, axis)
            }
            Op::Transpose => self.transpose(g),
            Op::GatherRows(index) => {
                let rows = self.shape(p(0))[0];
                self.scatter_rows(g, index, rows)
            }
            Op::ScatterRows { index, .. } => self.gather_rows(g, index),
        }
    }
}
