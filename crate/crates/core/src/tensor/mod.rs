//! Dense row-major tensors and a small reverse-mode differentiation tape.
//!
//! The op set is exactly what the detection model needs. Every op is
//! available through the [`Backend`] trait, which has two implementations:
//! [`Eager`] evaluates immediately in either precision, and [`Graph`]
//! records a tape in 64-bit floats for [`Graph::backward`].

mod backend;
mod graph;
pub mod kernels;

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use thiserror::Error;

pub use backend::{Backend, Eager};
pub use graph::{Gradients, Graph, Var};

/// Floating point element type. Implemented for `f32` (fast mode) and
/// `f64` (reference mode).
pub trait Real:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument ({detail})")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward: non-finite gradient reached node {node}")]
    NonFiniteGradient { node: usize },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R = f64> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![R::zero(); numel],
        }
    }

    pub fn scalar(x: R) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, values.iter().map(|&v| R::of_f64(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[R] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[R] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> R {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self, TensorError> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Tensor {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        })
    }
}
