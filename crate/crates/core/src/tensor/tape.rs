use super::ops::Op;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(super) struct Node<F> {
    pub value: Tensor<F>,
    pub op: Op<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

/// Append-only record of a computation.
///
/// Nodes are pushed in evaluation order, so index order is a topological
/// order and backward is a single reverse sweep.
pub struct Tape<F: Float> {
    pub(super) nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub(super) fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            node.op.backward(&self.nodes, &node.value, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` if `v` needs no gradient.
pub(super) fn slot<'g, F: Float>(
    grads: &'g mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    v: Var,
) -> Option<&'g mut Vec<F>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]))
}
