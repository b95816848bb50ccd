use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::ops::Op;
use super::{Result, Tensor, TensorError};

pub(crate) struct Node {
    pub value: Arc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
    pub param: Option<usize>,
}

/// Records operations in execution order. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that does not receive gradients (inputs, targets).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Arc::new(value), Op::Leaf, false, None)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.insert(Arc::new(value), Op::Leaf, true, None)
    }

    /// Leaf sharing storage with a model parameter. `param` is echoed back in
    /// [`Gradients::params`].
    pub fn parameter(&self, value: Arc<Tensor>, param: usize) -> Var<'_> {
        self.insert(value, Op::Leaf, true, Some(param))
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            let inputs = op.inputs();
            if cfg!(debug_assertions) && !value.all_finite() && inputs.iter().all(|&i| nodes[i].value.all_finite()) {
                panic!("{} produced a non-finite value from finite inputs", op.name());
            }
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.insert(Arc::new(value), op, requires_grad, None)
    }

    fn insert(&self, value: Arc<Tensor>, op: Op, requires_grad: bool, param: Option<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar loss. Each recorded op is visited once, in
    /// reverse order; gradients accumulate additively across fan-out.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            node.op.backward(&node.value, &g, &nodes, &mut grads);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| n.param.map(|p| (p, id)))
            .filter(|&(_, id)| grads[id].is_some())
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients of leaves reachable from the loss.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// `(parameter index, gradient)` for every parameter leaf that received
    /// a gradient. A parameter placed on the tape twice appears twice.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, id)| self.grads[id].as_deref().map(|g| (p, g)))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
