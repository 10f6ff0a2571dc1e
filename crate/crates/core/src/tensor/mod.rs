//! Dense f64 tensors and a reverse-mode tape.
//!
//! Values are row-major `Vec<f64>` with an explicit shape; scalars have the
//! empty shape. Differentiation happens on a [`Tape`]: operations append
//! nodes, [`Tape::backward`] walks them once in reverse, and gradients
//! accumulate additively until the tape is dropped or reset. A tape belongs
//! to one thread for its lifetime; run independent tapes for concurrency.

pub mod kernels;
pub mod special;
mod tape;

pub use tape::{Tape, Var, EXP_CLAMP};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} do not conform")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: {count} elements do not fit shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        count: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} has a zero extent")]
    ZeroExtent { op: &'static str, shape: Vec<usize> },
    #[error("{op}: non-finite value {value} at flat index {index}")]
    NonFinite {
        op: &'static str,
        value: f64,
        index: usize,
    },
    #[error("{op}: {requirement}, got {value} at flat index {index}")]
    Domain {
        op: &'static str,
        requirement: &'static str,
        value: f64,
        index: usize,
    },
    #[error("{op}: index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: variable #{var} does not belong to this tape (len {len})")]
    ForeignVar {
        op: &'static str,
        var: usize,
        len: usize,
    },
    #[error("{op}: {msg}")]
    Unsupported { op: &'static str, msg: String },
}

/// Row-major dense tensor. Plain storage; differentiation lives on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { op: "tensor", shape });
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "tensor",
                count: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; count],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (shape product 1) tensor.
    pub fn item(&self) -> Option<f64> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        for (index, &value) in self.data.iter().enumerate() {
            if !value.is_finite() {
                return Err(TensorError::NonFinite { op, value, index });
            }
        }
        Ok(())
    }
}
