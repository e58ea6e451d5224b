//! Dense n-dimensional arrays with reverse-mode differentiation.
//!
//! [`Tensor`] is the value type: a shape plus row-major `f64` storage and an
//! optional gradient buffer. [`Graph`] records primitive operations during a
//! forward pass and replays them backwards to produce gradients with respect
//! to any leaf, including inputs. Everything is 64-bit.

mod graph;

pub use graph::{Gradients, Graph, Var};

use crate::error::{Error, Result};

/// Row-major dense array. Immutable once recorded on a graph; the gradient
/// buffer, when populated, always has the same shape as the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel != values.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret the storage under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {} elements into {shape:?}",
                self.values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values: self.values.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    /// Number of samples when the first axis is a batch axis.
    pub fn batch_len(&self) -> usize {
        self.shape[0]
    }

    /// Per-sample element count for a batched tensor.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Row `i` of a batched tensor, as a slice.
    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.sample_len();
        &self.values[i * w..(i + 1) * w]
    }

    /// Stack per-sample slices into a batched tensor of `sample_shape` rows.
    pub fn stack(rows: &[&[f64]], sample_shape: &[usize]) -> Result<Tensor> {
        let w: usize = sample_shape.iter().product();
        let mut values = Vec::with_capacity(rows.len() * w);
        for r in rows {
            if r.len() != w {
                return Err(Error::InvalidArgument(format!(
                    "row length {} does not match sample shape {sample_shape:?}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(sample_shape);
        Tensor::new(shape, values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
