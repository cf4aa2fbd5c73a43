//! Reverse-mode differentiation graph.
//!
//! Nodes are appended in construction order, which is already a topological
//! order, so backward is a single reverse sweep that visits each node once.
//! A graph is consumed by `backward`; building a second backward pass
//! requires rebuilding the graph.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

/// Backward step: reads node values and the incoming gradient, accumulates
/// into parent gradient slots.
pub(crate) type BackFn<T> =
    Box<dyn FnOnce(&[Tensor<T>], &[T], &mut [Option<Vec<T>>]) + Send>;

pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    backs: Vec<Option<BackFn<T>>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            requires: Vec::new(),
            backs: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Insert a leaf. It participates in gradient flow iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires = t.needs_grad();
        self.push_node(t, requires, None)
    }

    /// Insert a constant (never receives gradients).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t, false, None)
    }

    pub(crate) fn push_node(&mut self, value: Tensor<T>, requires: bool, back: Option<BackFn<T>>) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.requires.push(requires);
        self.backs.push(back);
        Var { id }
    }

    pub(crate) fn check_open(&self, op: &str) -> Result<()> {
        if self.consumed {
            return Err(Error::usage(
                op,
                "graph was consumed by backward; rebuild it before adding ops",
            ));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.id]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Run reverse-mode differentiation from a scalar loss. Populates the
    /// gradient of every `requires_grad` leaf reachable from it and marks
    /// the graph consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::usage(
                "backward",
                "graph already consumed; rebuild it before calling backward again",
            ));
        }
        let lt = &self.values[loss.id];
        if lt.numel() != 1 {
            return Err(Error::usage(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        if !self.requires[loss.id] {
            return Err(Error::usage(
                "backward",
                "loss is not connected to any requires_grad leaf",
            ));
        }
        self.consumed = true;
        self.grads = vec![None; self.values.len()];
        self.grads[loss.id] = Some(vec![T::ONE]);
        for i in (0..=loss.id).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            if let Some(back) = self.backs[i].take() {
                let grad_out = self.grads[i].take().expect("grad slot present");
                back(&self.values, &grad_out, &mut self.grads);
                self.grads[i] = Some(grad_out);
            }
        }
        Ok(())
    }

    /// Gradient of a node after `backward`; `None` if the node was not
    /// reached or does not require grad.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Gradient of `v` shaped like its value.
    pub fn grad_tensor(&self, v: Var) -> Result<Tensor<T>> {
        let g = self.grad(v).ok_or_else(|| {
            Error::usage("grad_tensor", "no gradient present; run backward first")
        })?;
        Tensor::new(self.values[v.id].shape(), g.to_vec())
    }
}

/// Accumulate `contribution` into the gradient slot for node `id`,
/// initializing it to zeros when first touched.
pub(crate) fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    id: usize,
    len: usize,
    write: impl FnOnce(&mut [T]),
) {
    let slot = grads[id].get_or_insert_with(|| vec![T::ZERO; len]);
    write(slot);
}
