use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::ops;
use crate::tensor::Tensor;

pub(crate) type NodeId = usize;

/// Recorded operation together with whatever forward state its adjoint needs.
pub(crate) enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Shift(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Clamp {
        x: NodeId,
        lo: F,
        hi: F,
    },
    Matmul(NodeId, NodeId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        cols: Vec<F>,
        geom: ops::conv::ConvGeom,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
        spatial: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    MulChannel {
        att: NodeId,
        map: NodeId,
    },
    Concat(NodeId, NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<F>,
        labels: Vec<usize>,
    },
    SqDist(NodeId, NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        indices: Vec<usize>,
    },
    GaussianLogProb {
        mean: NodeId,
        sample: Vec<F>,
        sigma: F,
    },
}

pub(crate) struct Node<F> {
    pub(crate) value: Rc<Tensor<F>>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

struct Inner<F> {
    nodes: Vec<Node<F>>,
    generation: u64,
}

/// Define-by-run recording of a computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<F: Float = f32> {
    inner: RefCell<Inner<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("generation", &inner.generation)
            .finish()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                generation: 0,
            }),
        }
    }

    /// A leaf that gradients are accumulated for.
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generation(&self) -> u64 {
        self.inner.borrow().generation
    }

    /// Drops every recorded node. Variables created before the call become
    /// invalid and any further use of them reports [`AutodiffError::TapeCleared`].
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    pub(crate) fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            generation: inner.generation,
        }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor<F>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        loss.check()?;
        let inner = self.inner.borrow();
        let shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.id).map(|_| None).collect();
        if inner.nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(&shape, F::one()));
        }
        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let contributions = ops::backward(&inner.nodes, node, &g);
            grads[id] = Some(g);
            for (parent, delta) in contributions {
                if !inner.nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients {
            grads,
            generation: inner.generation,
        })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float = f32> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: NodeId,
    pub(crate) generation: u64,
}

impl<F: Float> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("generation", &self.generation)
            .finish()
    }
}

impl<'t, F: Float> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub(crate) fn check(&self) -> Result<()> {
        let current = self.tape.generation();
        if current != self.generation {
            return Err(AutodiffError::TapeCleared {
                var: self.generation,
                tape: current,
            });
        }
        Ok(())
    }

    pub(crate) fn check_pair(&self, other: &Var<'t, F>) -> Result<()> {
        self.check()?;
        other.check()?;
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(AutodiffError::InvalidArgument {
                op: "binary op",
                reason: "operands live on different tapes".into(),
            });
        }
        Ok(())
    }

    /// Forward value. Panics if the tape was cleared after this variable was
    /// created; use [`Var::try_value`] to get an error instead.
    pub fn value(&self) -> Rc<Tensor<F>> {
        self.try_value().expect("variable used after its tape was cleared")
    }

    pub fn try_value(&self) -> Result<Rc<Tensor<F>>> {
        self.check()?;
        Ok(self.tape.value_of(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// A new constant leaf holding this variable's value.
    pub fn detach(&self) -> Result<Var<'t, F>> {
        let value = (*self.try_value()?).clone();
        Ok(self.tape.constant(value))
    }

    pub(crate) fn unary(&self, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub(crate) fn binary(&self, other: &Var<'t, F>, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }
}

/// Result of a backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients<F: Float = f32> {
    grads: Vec<Option<Tensor<F>>>,
    generation: u64,
}

impl<F: Float> Gradients<F> {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: &Var<'_, F>) -> Option<&Tensor<F>> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_, F>) -> Tensor<F> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}
