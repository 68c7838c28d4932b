//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to its
//! [`Tape`]. [`Tape::backward`] walks the nodes in reverse execution order once,
//! accumulating gradients additively where a value feeds several consumers.
//! A tape is single-threaded; one training step builds and consumes one tape.

mod conv;
mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::fmt;

use crate::error::TensorError;
use crate::tensor::{Element, Tensor};

pub use conv::{conv_output_len, Padding};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, FD_STEP};
pub use ops::{gelu_scalar, softmax_tensor};

/// Backward rule: maps the gradient of a node's output to one optional
/// gradient per parent, in parent order.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: gradients flow into it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), None, false)
    }

    /// Append an operation result.
    ///
    /// `backward` is dropped when no parent requires a gradient. Non-finite
    /// outputs are rejected before they enter the tape.
    pub fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let nodes = self.nodes.borrow();
        let requires_grad = parents.iter().any(|p| {
            debug_assert!(std::ptr::eq(p.tape, self), "{op}: mixing tapes");
            nodes[p.id].requires_grad
        });
        drop(nodes);
        let ids = parents.iter().map(|p| p.id).collect();
        let backward = requires_grad.then_some(backward);
        Ok(self.push_node(value, ids, backward, requires_grad))
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, backward, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradients of a scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(TensorError::NotScalar { shape: out.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::ones(out.value.shape().to_vec()));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            let parent_grads = backward(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                grads[pid] = Some(match grads[pid].take() {
                    None => pg,
                    Some(mut acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + b;
                        }
                        acc
                    }
                });
            }
            // Interior gradients are not needed once propagated.
            if !node.parents.is_empty() {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one [`Tape::backward`] call, indexed by leaf.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of its shape when nothing reached it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_in_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = x.add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0]);
    }

    #[test]
    fn fan_out_equals_sum_of_uses() {
        // f = sum(x*x) + sum(3x): df/dx = 2x + 3
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = x.mul(x).unwrap().sum().unwrap();
        let lin = x.scale(3.0).unwrap().sum().unwrap();
        let f = sq.add(lin).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones([2]));
        let x = tape.leaf(Tensor::ones([2]));
        let y = c.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([1], f32::MAX));
        assert_eq!(x.scale(10.0).unwrap_err(), TensorError::NonFinite { op: "scale" });
        let err = x.mul(tape.constant(Tensor::full([1], f32::MAX))).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "mul" });
    }
}
