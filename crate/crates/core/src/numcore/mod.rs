//! Minimal f64 tensor arithmetic with reverse-mode differentiation.
//!
//! Design decisions:
//! - Row-major flat `Vec<f64>` storage; shapes are explicit and checked on
//!   every operation, failures carry both offending shapes.
//! - A [`Tape`](tape::Tape) records tensor-granular primitives with local
//!   gradient closures; operations whose inputs carry no gradient record
//!   nothing, so frozen-parameter forward passes cost no bookkeeping.
//! - No NaN or infinity survives a public operation: every produced value is
//!   checked and rejected with the operation named.
//! - The primitive set is exactly what the model and losses consume; there is
//!   no broadcasting engine and no speculative generality.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{GradMap, Tape, Var};
pub use tensor::Tensor;

use std::fmt;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum NumError {
    /// Shape metadata disagrees with the data length.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// One operand has the wrong rank or dimensions for the named operation.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    /// An operation produced a NaN or infinity.
    NonFinite { op: &'static str },
    /// An index is out of bounds for the named operation.
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    /// A variable from one tape was used with another.
    ForeignVar { op: &'static str },
    /// The differentiation root is not a scalar.
    NonScalarRoot { shape: Vec<usize> },
    /// A parameter or argument is outside its documented domain.
    Domain { op: &'static str, detail: String },
}

impl fmt::Display for NumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumError::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {shape:?} does not describe {len} elements")
            }
            NumError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            NumError::BadShape { op, shape, expected } => {
                write!(f, "{op}: got shape {shape:?}, expected {expected}")
            }
            NumError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            NumError::IndexOutOfBounds { op, index, len } => {
                write!(f, "{op}: index {index} out of bounds for length {len}")
            }
            NumError::ForeignVar { op } => {
                write!(f, "{op}: variable does not belong to this tape")
            }
            NumError::NonScalarRoot { shape } => {
                write!(f, "backward: root must be a scalar, got shape {shape:?}")
            }
            NumError::Domain { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for NumError {}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<(), NumError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite { op })
    }
}
