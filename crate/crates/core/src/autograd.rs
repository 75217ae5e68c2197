//! Tape-based reverse-mode differentiation.
//!
//! Each recorded op keeps only the tensors its backward closure captures, so
//! with gradients disabled nothing is retained and intermediate activations
//! are freed as soon as the last [`Var`] holding them drops.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::tensor::{Real, Tensor};

/// Backward closure: receives the upstream gradient and a `needs` mask, one
/// entry per input, and returns the gradient for each input that needs one.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// A value flowing through the graph.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    /// Shared handle on the value, for capture in backward closures.
    pub fn rc(&self) -> Rc<Tensor<T>> {
        self.value.clone()
    }
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Graph<T> {
    /// Graph that records ops for a later [`Graph::backward`].
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// Graph that records nothing; every op result is a constant.
    pub fn inference() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var { value: Rc::new(t), id: None }
    }

    /// Differentiable input. Gradients for it are kept after `backward`.
    pub fn leaf(&self, value: Rc<Tensor<T>>) -> Var<T> {
        if !self.grad_enabled {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { inputs: Vec::new(), backward: None });
        Var { value, id: Some(id) }
    }

    pub fn leaf_tensor(&self, t: Tensor<T>) -> Var<T> {
        self.leaf(Rc::new(t))
    }

    /// Records an op result. The closure is only stored if some input needs a gradient.
    pub fn record<F>(&self, value: Tensor<T>, inputs: &[&Var<T>], backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        self.record_rc(Rc::new(value), inputs, backward)
    }

    /// Like [`Graph::record`] for a value the closure may also capture.
    pub fn record_rc<F>(&self, value: Rc<Tensor<T>>, inputs: &[&Var<T>], backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if !self.grad_enabled || inputs.iter().all(|v| v.id.is_none()) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var { value, id: Some(id) }
    }

    /// Runs reverse accumulation from a scalar (or any-shaped, seeded with ones) output.
    ///
    /// Consumes the tape: closures and their saved tensors are released as the
    /// sweep passes them. Only leaf gradients are kept in the result.
    pub fn backward(&self, out: &Var<T>) -> Gradients<T> {
        let mut nodes = core::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let Some(root) = out.id else {
            return Gradients { grads };
        };
        grads[root] = Some(Tensor::ones(out.shape()));
        for id in (0..=root).rev() {
            let node = &mut nodes[id];
            let Some(f) = node.backward.take() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|i| i.is_some()).collect();
            let input_grads = f(&upstream, &needs);
            drop(f);
            for (slot, g) in node.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(g)) = (slot, g) {
                    match &mut grads[*i] {
                        Some(acc) => acc.add_assign(&g),
                        empty => *empty = Some(g),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|i| self.grads.get(i)).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        v.id.and_then(|i| self.grads.get_mut(i)).and_then(|g| g.take())
    }

    pub fn take_id(&mut self, id: usize) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}
