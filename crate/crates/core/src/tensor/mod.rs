//! Dense tensors with a tape-based reverse-mode autodiff graph.
//!
//! Values are plain row-major buffers. Every operation applied through a
//! [`Graph`] records a node holding its output value and input ids; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every leaf that requires them.
//!
//! Broadcasting is limited to leading-batch expansion: the right (or left)
//! operand of an elementwise op may have a shape that is a suffix of the
//! other operand's shape, in which case it is repeated over the leading
//! dimensions. Anything else needs an explicit reshape.

mod gradcheck;
mod graph;
mod params;
mod scalar;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{GradMap, Graph, Op, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;

use thiserror::Error;

/// Clamp applied before the logit in `inverse_sigmoid`.
pub const INVERSE_SIGMOID_EPS: f64 = 1e-6;

/// Epsilon added to the variance in `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unsupported op: {0}")]
    UnsupportedOp(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::shape(
                "new",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to the target precision.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::shape(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a 2-D index.
    pub fn at2(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }
}
