use std::cell::RefCell;
use std::rc::Rc;

use ndarray::Array2;

use super::Real;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one gradient per parent. `needs[i]` is false
/// for parents that do not lead to any trainable leaf; those slots may be `None`.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Array2<F>, &[bool]) -> Vec<Option<Array2<F>>>>;

struct Node<F: Real> {
    value: Rc<Array2<F>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Records a computation for one forward/backward pass.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Trainable leaf.
    pub fn param(&self, value: Array2<F>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array2<F>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Array2<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> Rc<Array2<F>> {
        Rc::clone(&self.nodes.borrow()[var.0].value)
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes.borrow()[var.0].value.dim()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    pub(crate) fn push_op(&self, value: Array2<F>, parents: &[Var], backward: BackwardFn<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a 1x1 loss, got {:?}",
                nodes[loss.0].value.dim()
            )));
        }
        let mut grads: Vec<Option<Array2<F>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut visited = 0usize;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = grads[i].as_ref() else { continue };
            visited += 1;
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.dim(), nodes[p].value.dim(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
            // interior gradients are no longer needed once propagated
            if !node.parents.is_empty() {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }
}

/// Gradients of leaves after [`Tape::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Array2<F>>>,
    visited: usize,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Array2<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Gradient of `var`, or zeros of `shape` when no path reached it.
    pub fn take_or_zeros(&mut self, var: Var, shape: (usize, usize)) -> Array2<F> {
        self.take(var).unwrap_or_else(|| Array2::zeros(shape))
    }

    /// Number of op nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
