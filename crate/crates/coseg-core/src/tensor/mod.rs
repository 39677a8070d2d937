//! Dense tensors and the reverse-mode differentiation graph built on them.
//!
//! A [`Tensor`] is an immutable n-dimensional value: a shape plus a flat,
//! row-major, `Arc`-shared buffer. Differentiation happens on a [`Graph`]:
//! tensors enter as leaves, operations run eagerly and are recorded, and
//! [`Graph::backward`] fills in leaf gradients.

mod graph;
mod kernels;

pub mod adam;

pub use graph::{Graph, Mode, NodeId};

use std::sync::Arc;

use crate::error::{format_dims, CosegError, Result};

/// Scalar element of a tensor. Gradient checking runs in `f64`; training may
/// run in `f32`.
pub trait Element:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const BITS: u32;
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const BITS: u32 = 32;
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const BITS: u32 = 64;
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Immutable dense tensor. Cloning shares the underlying buffer.
///
/// 4-d data is ordered `[batch, channel, height, width]`.
#[derive(Debug, Clone)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CosegError::invalid(
                "tensor",
                format!(
                    "shape {} implies {} elements but buffer holds {}",
                    format_dims(&shape),
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::zero(); numel]),
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// The single value of a 1-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on tensor with numel != 1");
        self.data[0]
    }

    /// Same buffer, different shape. Element count must be preserved.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CosegError::shape_mismatch("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| F::of_f64(v.as_f64())).collect()),
        }
    }

    /// Bitwise equality (shape and every element).
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }
}

/// Batch of binary segmentation targets, `n` grids of `h`x`w` labels in
/// `{0, 1}` (1 = foreground).
#[derive(Debug, Clone)]
pub struct MaskBatch {
    n: usize,
    h: usize,
    w: usize,
    labels: Arc<Vec<u8>>,
}

impl MaskBatch {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(CosegError::invalid(
                "mask_batch",
                format!(
                    "expected {} labels for {}x{}x{}, got {}",
                    n * h * w,
                    n,
                    h,
                    w,
                    labels.len()
                ),
            ));
        }
        if let Some(pos) = labels.iter().position(|&v| v > 1) {
            return Err(CosegError::invalid(
                "mask_batch",
                format!("label {} at index {} is outside {{0,1}}", labels[pos], pos),
            ));
        }
        Ok(MaskBatch {
            n,
            h,
            w,
            labels: Arc::new(labels),
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}
