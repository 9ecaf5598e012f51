//! Reverse-mode differentiation over an explicit, per-step computation graph.
//!
//! A [`Graph`] is an append-only list of recorded primitive applications.
//! Every backward rule is written in terms of the same primitives as the
//! forward pass, so when [`Graph::grad`] runs with `create_graph` the
//! gradients it returns are ordinary graph nodes and can be differentiated
//! again. That is the whole mechanism behind differentiating a meta loss
//! through a gradient-descent step.
//!
//! Graphs are never global. Callers create one per training step and drop
//! it (or keep it alive with `retain`) when the step ends.

mod backward;
pub mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("grad: output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("grad: tensor {0} does not require grad")]
    NotDifferentiable(NodeId),
    #[error("graph was released by a non-retaining grad call")]
    GraphReleased,
    #[error("operands belong to different graphs")]
    ForeignGraph,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    MulConst(NodeId, Tensor<T>),
    Exp(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId, Tensor<T>),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    ConvInputGrad {
        gy: NodeId,
        w: NodeId,
        stride: usize,
    },
    ConvWeightGrad {
        x: NodeId,
        gy: NodeId,
        stride: usize,
    },
    BroadcastBias(NodeId),
    SumToBias(NodeId),
    Gather {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    ScatterAdd {
        g: NodeId,
        idx: Arc<Vec<usize>>,
    },
    Upsample2(NodeId),
    SumPool2(NodeId),
    Concat(Vec<NodeId>),
    Narrow {
        x: NodeId,
        start: usize,
    },
    PadChannels {
        x: NodeId,
        start: usize,
    },
    LogSoftmax(NodeId),
    SumChannels(NodeId),
    BroadcastChannels(NodeId),
    Sum(NodeId),
    Expand(NodeId),
    Reshape(NodeId),
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | MulConst(a, _) | Exp(a) | Sigmoid(a) | Relu(a, _) => {
                vec![*a]
            }
            Conv2d { x, w, .. } => vec![*x, *w],
            ConvInputGrad { gy, w, .. } => vec![*gy, *w],
            ConvWeightGrad { x, gy, .. } => vec![*x, *gy],
            BroadcastBias(a) | SumToBias(a) | Upsample2(a) | SumPool2(a) | LogSoftmax(a)
            | SumChannels(a) | BroadcastChannels(a) | Sum(a) | Expand(a) | Reshape(a) => vec![*a],
            Gather { x, .. } => vec![*x],
            ScatterAdd { g, .. } => vec![*g],
            Concat(xs) => xs.clone(),
            Narrow { x, .. } | PadChannels { x, .. } => vec![*x],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Explicit computation graph for one step.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
    released: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradOptions {
    /// Keep the graph usable for another `grad` call.
    pub retain: bool,
    /// Record the backward pass so the returned gradients are differentiable.
    pub create_graph: bool,
}

pub struct Gradients<'g, T: Scalar> {
    pub grads: Vec<Var<'g, T>>,
    /// `true` where the corresponding `wrt` entry is not reachable from the
    /// output; its gradient is then an all-zero constant.
    pub unreachable: Vec<bool>,
}

impl<'g, T: Scalar> Gradients<'g, T> {
    pub fn values(&self) -> Vec<Tensor<T>> {
        self.grads.iter().map(|g| g.value()).collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            released: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_released(&self) -> bool {
        self.released.get()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, true)
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a primitive application. The node keeps its op (and thereby
    /// its links to the inputs) only when an input requires grad and the
    /// graph is recording.
    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        let needs = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        if needs {
            if self.released.get() {
                return Err(AutodiffError::GraphReleased);
            }
            Ok(self.push_raw(value, op, true))
        } else {
            Ok(self.push_raw(value, Op::Leaf, false))
        }
    }

    pub(crate) fn node(&self, id: NodeId) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    pub(crate) fn var(&self, id: NodeId) -> Var<'_, T> {
        Var { graph: self, id }
    }

    /// Gradients of a scalar `output` with respect to each tensor in `wrt`.
    pub fn grad<'g>(
        &'g self,
        output: Var<'g, T>,
        wrt: &[Var<'g, T>],
        opts: GradOptions,
    ) -> Result<Gradients<'g, T>> {
        if self.released.get() {
            return Err(AutodiffError::GraphReleased);
        }
        if !std::ptr::eq(output.graph, self) || wrt.iter().any(|w| !std::ptr::eq(w.graph, self))
        {
            return Err(AutodiffError::ForeignGraph);
        }
        let out_shape = output.shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarOutput(out_shape));
        }
        for w in wrt {
            if !w.requires_grad() {
                return Err(AutodiffError::NotDifferentiable(w.id));
            }
        }

        let n = output.id + 1;
        let needed: Vec<bool> = {
            let nodes = self.nodes.borrow();
            let mut is_wrt = vec![false; n];
            for w in wrt {
                if w.id < n {
                    is_wrt[w.id] = true;
                }
            }
            let mut depends = vec![false; n];
            for i in 0..n {
                let node = &nodes[i];
                depends[i] = is_wrt[i]
                    || (node.requires_grad && node.op.inputs().iter().any(|&j| depends[j]));
            }
            let mut reaches = vec![false; n];
            reaches[output.id] = true;
            for i in (0..n).rev() {
                if reaches[i] && nodes[i].requires_grad {
                    for j in nodes[i].op.inputs() {
                        reaches[j] = true;
                    }
                }
            }
            (0..n).map(|i| depends[i] && reaches[i]).collect()
        };

        let was_recording = self.recording.replace(opts.create_graph);
        let result = self.backward_pass(output, &needed);
        self.recording.set(was_recording);
        let grads = result?;

        let mut out = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::with_capacity(wrt.len());
        for w in wrt {
            match grads.get(w.id).copied().flatten() {
                Some(g) => {
                    out.push(g);
                    unreachable.push(false);
                }
                None => {
                    log::debug!("grad: tensor {} is unreachable from the output", w.id);
                    out.push(self.constant(Tensor::zeros(&w.shape())));
                    unreachable.push(true);
                }
            }
        }
        if !opts.retain {
            self.released.set(true);
        }
        Ok(Gradients {
            grads: out,
            unreachable,
        })
    }

    fn backward_pass<'g>(
        &'g self,
        output: Var<'g, T>,
        needed: &[bool],
    ) -> Result<Vec<Option<Var<'g, T>>>> {
        let n = needed.len();
        let mut grads: Vec<Option<Var<'g, T>>> = vec![None; n];
        if !needed[output.id] {
            return Ok(grads);
        }
        grads[output.id] = Some(self.constant(Tensor::full(&output.shape(), T::one())));
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.node(i).op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let contributions = self.backward_rule(i, &op, g, &|j| needed[j])?;
            for (j, gj) in contributions {
                grads[j] = Some(match grads[j] {
                    None => gj,
                    Some(prev) => prev.add(gj)?,
                });
            }
        }
        Ok(grads)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.node(self.id).value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node(self.id).value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.node(self.id).value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.node(self.id).requires_grad
    }

    /// Constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant(self.value())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.graph.node(self.id).value.item()
    }
}

/// One plain gradient-descent step `theta - alpha * g` kept inside the graph,
/// so the result stays a differentiable function of whatever produced `g`.
pub fn differentiable_step<'g, T: Scalar>(
    theta: &[Var<'g, T>],
    g: &[Var<'g, T>],
    alpha: T,
) -> Result<Vec<Var<'g, T>>> {
    if theta.len() != g.len() {
        return Err(AutodiffError::LengthMismatch(theta.len(), g.len()));
    }
    theta
        .iter()
        .zip(g)
        .map(|(t, gi)| t.sub(gi.scale(alpha)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v)
    }

    #[test]
    fn first_derivative_of_square() {
        let g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = x.mul(x).unwrap().sum().unwrap();
        let d = g.grad(y, &[x], GradOptions::default()).unwrap();
        assert_eq!(d.grads[0].value().data(), &[6.0]);
    }

    #[test]
    fn second_derivative_of_square() {
        let g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = x.mul(x).unwrap().sum().unwrap();
        let opts = GradOptions {
            retain: true,
            create_graph: true,
        };
        let d = g.grad(y, &[x], opts).unwrap();
        assert!(d.grads[0].requires_grad());
        let s = d.grads[0].sum().unwrap();
        let dd = g.grad(s, &[x], GradOptions::default()).unwrap();
        assert_eq!(dd.grads[0].value().data(), &[2.0]);
    }

    #[test]
    fn without_create_graph_gradients_are_constants() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -2.0]));
        let y = x.mul(x).unwrap().sum().unwrap();
        let d = g
            .grad(
                y,
                &[x],
                GradOptions {
                    retain: true,
                    create_graph: false,
                },
            )
            .unwrap();
        assert!(!d.grads[0].requires_grad());
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = x.mul(x).unwrap();
        assert!(matches!(
            g.grad(y, &[x], GradOptions::default()),
            Err(AutodiffError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn unreachable_wrt_gets_zero_and_flag() {
        let g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.mul(x).unwrap().sum().unwrap();
        let d = g.grad(y, &[x, unused], GradOptions::default()).unwrap();
        assert_eq!(d.unreachable, vec![false, true]);
        assert_eq!(d.grads[1].value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn released_graph_rejects_second_traversal() {
        let g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let y = x.mul(x).unwrap().sum().unwrap();
        g.grad(y, &[x], GradOptions::default()).unwrap();
        assert!(g.is_released());
        assert_eq!(
            g.grad(y, &[x], GradOptions::default()).err(),
            Some(AutodiffError::GraphReleased)
        );
        assert_eq!(x.mul(x).err(), Some(AutodiffError::GraphReleased));
    }

    #[test]
    fn retained_graph_is_unchanged_by_traversal() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[0.5, -1.5]));
        let y = x.sigmoid().unwrap().sum().unwrap();
        let opts = GradOptions {
            retain: true,
            create_graph: false,
        };
        let a = g.grad(y, &[x], opts).unwrap().values();
        let b = g.grad(y, &[x], opts).unwrap().values();
        assert!(a[0].bit_eq(&b[0]));
    }

    #[test]
    fn foreign_graph_operands_are_rejected() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let a = g1.param(t(&[1], &[1.0]));
        let b = g2.param(t(&[1], &[1.0]));
        assert_eq!(a.add(b).err(), Some(AutodiffError::ForeignGraph));
    }

    #[test]
    fn differentiable_step_arithmetic() {
        let g = Graph::new();
        let th = g.param(t(&[1], &[1.0]));
        let gr = g.constant(t(&[1], &[2.0]));
        let out = differentiable_step(&[th], &[gr], 0.1).unwrap();
        assert!((out[0].item() - 0.8).abs() < 1e-15);
        let same = differentiable_step(&[th], &[gr], 0.0).unwrap();
        assert!(same[0].value().bit_eq(&th.value()));
    }

    #[test]
    fn differentiable_step_length_mismatch() {
        let g = Graph::new();
        let th = g.param(t(&[1], &[1.0]));
        assert!(matches!(
            differentiable_step(&[th, th], &[th], 0.1),
            Err(AutodiffError::LengthMismatch(2, 1))
        ));
    }
}
