use std::cell::{Cell, RefCell};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Computes input gradients from the output gradient. Gradients are flat,
/// row-major in each tensor's logical shape.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[&Tensor<T>]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    grad: Option<Vec<T>>,
}

/// Summary of one backward sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    /// Recorded operations whose backward rule ran.
    pub ops_visited: usize,
}

/// Ordered record of executed operations.
///
/// A tape is single-use: once [`Tape::backward`] has run, further backward
/// calls fail with a state error. Independent tapes share nothing and may
/// live on different threads.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
            grad: None,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push_node(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&[T], &[&Tensor<T>]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push_node(Node {
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            grad: None,
        })
    }

    pub fn value(&self, var: Var) -> Tensor<T> {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    /// Gradient accumulated at `var` by the last backward sweep.
    pub fn grad(&self, var: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape(), g.clone()).expect("grad matches shape"))
    }

    /// Reverse sweep from a 0-dimensional loss.
    pub fn backward(&self, loss: Var) -> Result<BackwardReport> {
        if self.consumed.get() {
            return Err(Error::State(
                "backward already ran on this tape; record a new tape".into(),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = loss.0;
        if !nodes[root].value.shape().is_empty() {
            return Err(Error::Usage(format!(
                "backward requires a 0-dimensional loss, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        self.consumed.set(true);
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        nodes[root].grad = Some(vec![T::one()]);

        let mut visited = 0;
        for id in (0..=root).rev() {
            let (input_grads, input_ids) = {
                let node = &nodes[id];
                let (Some(backward), Some(grad)) = (&node.backward, &node.grad) else {
                    continue;
                };
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&i| &nodes[i].value).collect();
                (backward(grad, &inputs), node.inputs.clone())
            };
            visited += 1;
            for (input, grad) in input_ids.into_iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                let target = &mut nodes[input];
                if !target.requires_grad {
                    continue;
                }
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += *g),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(BackwardReport {
            ops_visited: visited,
        })
    }
}
