//! Dense 1-3D float tensors and tape-based reverse-mode differentiation.
//!
//! The tensor substrate is deliberately small: 64-bit floats, row-major
//! storage, and exactly the operations the segment models need. Gradients
//! come from a Wengert tape ([`Tape`]) that records ops as they execute and
//! replays them in reverse.

mod check;
mod tape;

pub use check::grad_check;
pub use tape::{Tape, TensorId};

use thiserror::Error;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Shape constraint violated by an op's inputs.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// Construction with an invalid shape/data combination.
    #[error("invalid tensor shape: {detail}")]
    InvalidShape { detail: String },
    /// An op produced a NaN or infinity.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    /// An op that needs at least one element got none.
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of `f64` with 1 to 3 dimensions.
///
/// Plain value type: parameters, frames, and checkpoint payloads are all
/// `Tensor`s. Differentiable computation happens on a [`Tape`], which stores
/// one `Tensor` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating rank (1..=3), positive dims, and that
    /// `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(TensorError::InvalidShape {
                detail: format!("rank must be 1..=3, got {}", shape.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                detail: format!("dimensions must be positive, got {:?}", shape),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: valid shape required")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data).expect("vector: nonempty data required")
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::InvalidShape { detail: "ragged rows".into() });
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Shape {
                op: "dims2",
                detail: format!("expected 2-D, got {:?}", other),
            }),
        }
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[1];
        self.data[row * cols + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Log of a sum of exponentials over plain values, max-shifted.
///
/// Non-tape twin of [`Tape::logsumexp`]; the CTC oracle and tests use it on
/// raw path scores.
pub fn logsumexp_values(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(TensorError::Empty { op: "logsumexp" });
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - m).exp()).sum();
    Ok(m + sum.ln())
}
