//! Dense tensors, raw math kernels, and a reverse-mode tape.
//!
//! The tape owns every intermediate of a forward pass; trainable parameters
//! live outside it and are re-bound as leaves each step. All differentiable
//! structures are generic over [`Scalar`] so gradients can be cross-checked
//! against 64-bit finite differences while training runs in f32.

mod kernels;
mod scalar;
mod tape;

pub use kernels::{gemm, rms_norm_rows, rope_rows, silu_slice, softmax_rows_masked};
pub use scalar::Scalar;
pub use tape::{Tape, Var};

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 operand, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index range {start}..{end} out of bounds for extent {extent}")]
    RangeOutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("{op}: non-finite input at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward: expected a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward: tape already consumed")]
    ConsumedTape,
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: Vec<usize> },
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self, TensorError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::BadLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Scalar wrapped as a `[1, 1]` tensor.
    pub fn scalar(x: E) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    /// Gaussian draws with the given standard deviation. Sampling happens in
    /// f64 so f32 and f64 instantiations see identical values.
    pub fn randn(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            data.push(E::from_f64(z * std));
        }
        Tensor {
            shape: shape.to_vec(),
            data,
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

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Extent pair of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotMatrix {
                op: "dims2",
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> E {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Elementwise conversion to another element type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.to_f64())).collect(),
        }
    }
}
