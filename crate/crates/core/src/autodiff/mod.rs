//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every node's value is computed eagerly when the node is created. Gradients
//! are built by a reverse sweep that appends new nodes to the same graph, so a
//! gradient can itself be differentiated (double backward) when the sweep is
//! run with `create_graph = true`.

mod backward;
mod gradcheck;
mod primitive;

pub use gradcheck::{finite_diff_check, FdReport, REL_ERROR_FLOOR};
pub use primitive::Primitive;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node within one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Primitive,
    pub parents: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// The tape. Nodes are only ever appended; creation order is a valid
/// topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// When false, new op nodes are recorded as parentless constants.
    recording: bool,
    fault: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            fault: None,
        }
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

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.value(id).item()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Primitive::Leaf, Vec::new(), value, true)
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Primitive::Leaf, Vec::new(), value, false)
    }

    /// Makes the backward rule of the named primitive deliberately wrong.
    /// Only used to prove that gradient checks catch broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, primitive: &str) -> Result<()> {
        let name = Primitive::NAMES
            .iter()
            .find(|n| **n == primitive)
            .ok_or_else(|| Error::Invalid(format!("unknown primitive `{primitive}`")))?;
        self.fault = Some(name);
        Ok(())
    }

    pub(crate) fn fault(&self) -> Option<&'static str> {
        self.fault
    }

    /// Appends `op` applied to `inputs`, evaluating it immediately.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity(inputs.len()) {
            return Err(Error::shape(
                op.name(),
                format!("expected {} inputs, got {}", op.arity(inputs.len()), inputs.len()),
            ));
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            op.forward(&vals)?
        };
        if !self.recording {
            return Ok(self.push(Primitive::Leaf, Vec::new(), value, false));
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    fn push(&mut self, op: Primitive, parents: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        id
    }

    /// Smallest |input| over all relu nodes, used to keep finite-difference
    /// probes away from the kink.
    pub fn min_relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Primitive::Relu))
            .flat_map(|n| self.nodes[n.parents[0].0].value.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Recip, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Broadcast(shape.to_vec()), &[a])
    }

    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::SumTo(shape.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SumSquares, &[a])
    }

    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    ///
    /// With `create_graph` the returned nodes are recorded operations and can
    /// be differentiated again; otherwise they are detached constants. A
    /// `wrt` node that `output` does not depend on gets a zero tensor of its
    /// own shape.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId], create_graph: bool) -> Result<Vec<NodeId>> {
        backward::grad(self, output, wrt, create_graph)
    }

    /// Runs `f` with recording switched on or off, restoring the previous mode.
    pub(crate) fn with_recording<T>(&mut self, on: bool, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = std::mem::replace(&mut self.recording, on);
        let out = f(self);
        self.recording = prev;
        out
    }
}
