//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! The engine is deliberately small: flat `f64` tensors, an append-only
//! [`Tape`] of recorded operations, and a [`Tape::backward`] that can itself
//! be recorded (`create_graph`) so gradients of gradients work. That second
//! property is what the planner needs — the outer training loop
//! differentiates through the inner loop's gradient-descent updates.
//!
//! Tensors are immutable once recorded; updates produce new tensors. A tape
//! and its tensors belong to one thread of execution, but independent tapes
//! may run in parallel.

mod check;
mod tape;

pub use check::{finite_diff_check, sgd_update};
pub use tape::{ConvGeom, Tape};

use std::sync::Arc;

/// Identifies a node on a specific tape. Tapes get unique ids so a tensor
/// recorded on one tape is recognized (and treated as a constant) on another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub id: usize,
}

/// A shaped, immutable array of `f64`, optionally attached to a tape node.
///
/// Cloning is cheap (the buffer is shared). Scalars use the empty shape `[]`.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
    requires_grad: bool,
}

impl Tensor {
    /// Off-tape tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert!(
            numel == data.len(),
            "tensor: shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data: Arc::new(data), node: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![v; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert!(self.numel() == 1, "item: tensor has {} elements", self.numel());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer, detached from any tape.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None, requires_grad: false }
    }

    pub(crate) fn with_node(&self, node: NodeRef, requires_grad: bool) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: Some(node), requires_grad }
    }

    pub(crate) fn arc(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }
}

impl PartialEq for Tensor {
    /// Bitwise value equality (shape and every element, including -0.0 vs 0.0).
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests;
