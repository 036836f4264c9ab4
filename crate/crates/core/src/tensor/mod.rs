//! Dense `f64` tensors with tape-based reverse-mode autodiff.
//!
//! A [`Tensor`] is a plain value: shape, row-major data, and an optional
//! gradient buffer. All differentiable math runs through a [`Tape`], which
//! records every operation and replays it in reverse for gradients. Tensors
//! participating in a forward pass are bound to the tape as leaves first;
//! after `backward`, gradients are harvested back into the tensors.

mod gradcheck;
pub mod nn;
mod optim;
mod tape;

pub use gradcheck::grad_check;
pub use optim::{AdamW, AdamWConfig};
pub use tape::{NodeId, Tape};

use rand::Rng;

/// Dense n-dimensional array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// Build a tensor from explicit data. Panics if the element count does
    /// not match the shape product.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    /// Uniform init over `(lo, hi)`.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Symmetric uniform init with Xavier fan scaling for a 2-D weight.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::uniform(vec![fan_in, fan_out], -bound, bound, rng)
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Node this tensor was bound to on the current tape, if any.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Accumulate `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(
            delta.len(),
            self.data.len(),
            "gradient length {} does not match tensor shape {:?}",
            delta.len(),
            self.shape
        );
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Scale the gradient in place (global-norm clipping).
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = &mut self.grad {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Bind this tensor as a leaf on `tape`, remembering the node id so
    /// gradients can be harvested after backward.
    pub fn bind(&mut self, tape: &mut Tape) -> NodeId {
        let id = tape.leaf(self.shape.clone(), self.data.clone(), self.requires_grad);
        self.node = Some(id);
        id
    }

    /// Pull this tensor's gradient off the tape (after `Tape::backward`).
    /// A bound tensor the loss never touched has gradient zero.
    pub fn harvest_grad(&mut self, tape: &Tape) {
        if !self.requires_grad {
            return;
        }
        let node = self
            .node
            .expect("harvest_grad on a tensor that was never bound to the tape");
        match tape.grad(node) {
            Some(g) => {
                let delta = g.to_vec();
                self.accumulate_grad(&delta);
            }
            None => {
                let zeros = vec![0.0; self.data.len()];
                self.accumulate_grad(&zeros);
            }
        }
    }
}
