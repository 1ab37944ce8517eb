//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only list of op records; [`Var`] is a cheap handle
//! into it. Every backward rule is written in terms of graph ops, so calling
//! [`Graph::grad`] with `create_graph = true` yields gradients that are
//! themselves differentiable (double backprop, Hessian-vector products).
//! With `create_graph = false` the same rules run with recording switched off
//! and the results are detached constants.
//!
//! A graph is meant to live for one training step and is confined to one
//! thread (`Graph` is `!Sync`). Independent steps build independent graphs.

mod kernels;
mod ops;
mod tensor;

pub mod check;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

pub use kernels::ConvGeom;
pub use tensor::Tensor;

pub(crate) use ops::Op;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("variables from different graphs cannot be combined")]
    ForeignGraph,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Computation graph (tape). Nodes are only ever appended, so node order is
/// a topological order.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.len())
            .field("recording", &self.recording.get())
            .finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

/// Result of [`Graph::grad`]: one gradient per `wrt` entry, plus a flag per
/// entry that is set when the loss does not depend on it (the gradient is
/// then an explicit zero tensor).
#[derive(Debug)]
pub struct Gradients<'g> {
    pub grads: Vec<Var<'g>>,
    pub unreachable: Vec<bool>,
}

impl<'g> Gradients<'g> {
    pub fn any_unreachable(&self) -> bool {
        self.unreachable.iter().any(|&u| u)
    }

    pub fn all_unreachable(&self) -> bool {
        self.unreachable.iter().all(|&u| u)
    }

    pub fn values(&self) -> Vec<Rc<Tensor>> {
        self.grads.iter().map(|g| g.value()).collect()
    }
}

struct RecordingGuard<'a> {
    cell: &'a Cell<bool>,
    prev: bool,
}

impl Drop for RecordingGuard<'_> {
    fn drop(&mut self) {
        self.cell.set(self.prev);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: Cell::new(true) }
    }

    /// A graph that never records: every node is a detached constant. Used for
    /// inference, where only values are needed.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let requires_grad = self.recording.get();
        self.append(value, Op::Leaf, Vec::new(), requires_grad)
    }

    /// Leaf that never carries gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.append(value, Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Constant copy of `v`'s current value, cut off from the graph.
    pub fn detach<'g>(&'g self, v: Var<'g>) -> Var<'g> {
        self.constant((*v.value()).clone())
    }

    fn append(&self, value: Tensor, op: Op, inputs: Vec<usize>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let (op, inputs) = if requires_grad { (op, inputs) } else { (Op::Leaf, Vec::new()) };
        nodes.push(Node { value: Rc::new(value), op, inputs, requires_grad });
        Var { graph: self, id }
    }

    pub(crate) fn push<'g>(
        &'g self,
        op: Op,
        inputs: &[Var<'g>],
        value: Tensor,
    ) -> Result<Var<'g>, GradError> {
        if inputs.iter().any(|v| !std::ptr::eq(v.graph, self)) {
            return Err(GradError::ForeignGraph);
        }
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: op.name() });
        }
        let requires_grad = self.recording.get() && inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.append(value, op, ids, requires_grad))
    }

    fn set_recording(&self, on: bool) -> RecordingGuard<'_> {
        let prev = self.recording.replace(on);
        RecordingGuard { cell: &self.recording, prev }
    }

    /// Gradients of a scalar `loss` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned tensors are graph nodes and can be
    /// differentiated again; without it they are detached constants. A `wrt`
    /// entry the loss does not depend on gets an explicit zero gradient and
    /// its `unreachable` flag set.
    pub fn grad<'g>(
        &'g self,
        loss: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Gradients<'g>, GradError> {
        if !std::ptr::eq(loss.graph, self) || wrt.iter().any(|w| !std::ptr::eq(w.graph, self)) {
            return Err(GradError::ForeignGraph);
        }
        let loss_value = loss.value();
        if !loss_value.is_scalar() {
            return Err(GradError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let lid = loss.id;
        let mut on_path = vec![false; lid + 1];
        let mut lo = lid + 1;
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id <= lid && nodes[w.id].requires_grad {
                    on_path[w.id] = true;
                    lo = lo.min(w.id);
                }
            }
            for i in lo..=lid {
                if !on_path[i] {
                    on_path[i] = nodes[i].inputs.iter().any(|&j| on_path[j]);
                }
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; lid + 1];
        if lo <= lid && on_path[lid] {
            let _guard = self.set_recording(create_graph);
            grads[lid] = Some(self.constant(Tensor::full(loss_value.shape(), 1.0)));
            for i in (lo..=lid).rev() {
                if !on_path[i] {
                    continue;
                }
                let Some(gy) = grads[i] else { continue };
                let (op, inputs) = {
                    let nodes = self.nodes.borrow();
                    (nodes[i].op.clone(), nodes[i].inputs.clone())
                };
                if matches!(op, Op::Leaf) {
                    continue;
                }
                let needed: Vec<bool> = inputs.iter().map(|&j| on_path[j]).collect();
                let input_vars: Vec<Var<'g>> = inputs.iter().map(|&id| Var { graph: self, id }).collect();
                let out = Var { graph: self, id: i };
                let contributions = ops::backward(&op, &input_vars, out, gy, &needed)?;
                for ((&j, contrib), need) in inputs.iter().zip(contributions).zip(needed) {
                    if !need {
                        continue;
                    }
                    if let Some(c) = contrib {
                        grads[j] = Some(match grads[j] {
                            Some(acc) => acc.add(c)?,
                            None => c,
                        });
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::with_capacity(wrt.len());
        for w in wrt {
            match grads.get(w.id).copied().flatten() {
                Some(g) if on_path[w.id] => {
                    out.push(g);
                    unreachable.push(false);
                }
                _ => {
                    out.push(self.constant(Tensor::zeros(&w.shape())));
                    unreachable.push(true);
                }
            }
        }
        Ok(Gradients { grads: out, unreachable })
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
