use std::sync::atomic::{AtomicU64, Ordering};

use crate::ops::{backward_op, Op};
use crate::{AdError, Result, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Append-only record of a forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only accumulated for leaves with
    /// `requires_grad` and the nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AdError::NonFinite("leaf"));
        }
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    /// Accumulated gradient, or `None` when the node does not depend on any
    /// trainable leaf or backward has not reached it.
    pub fn grad(&self, v: Var) -> Result<Option<&[f64]>> {
        Ok(self.nodes[self.index(v)?].grad.as_deref())
    }

    /// Gradient with zeros substituted for nodes that received none.
    pub fn grad_or_zeros(&self, v: Var) -> Result<Vec<f64>> {
        let node = &self.nodes[self.index(v)?];
        Ok(node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.len()]))
    }

    /// Clears all gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let idx = self.index(loss)?;
        if self.backward_done {
            return Err(AdError::BackwardTwice);
        }
        let shape = self.nodes[idx].value.shape().to_vec();
        if self.nodes[idx].value.len() != 1 {
            return Err(AdError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[idx].requires_grad {
            return Ok(());
        }
        self.nodes[idx].grad = Some(vec![1.0]);
        for i in (0..=idx).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            backward_op(&node.op, &node.value, grad, before);
        }
        Ok(())
    }

    pub(crate) fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AdError::DetachedNode);
        }
        Ok(v.index)
    }

    pub(crate) fn node(&self, v: Var) -> Result<&Node> {
        Ok(&self.nodes[self.index(v)?])
    }

    pub(crate) fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an op result after the finiteness check.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        parents: &[usize],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(AdError::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }
}
