use thiserror::Error;

/// Errors raised by the tensor substrate and the reverse-mode engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: dimension mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: non-finite value in tensor")]
    NonFinite { op: &'static str },
    #[error("context normalization needs at least 2 points, got {0}")]
    DegenerateContext(usize),
    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("axis {axis} out of range for a {rank}-d tensor")]
    BadAxis { axis: usize, rank: usize },
    #[error("soft threshold must be nonnegative, got {0}")]
    NegativeThreshold(f64),
    #[error("batch norm over an empty batch")]
    EmptyBatch,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: non-finite gradient produced by `{op}`")]
    NumericalGradient { op: &'static str },
}

pub type Result<T> = std::result::Result<T, DiffError>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> DiffError {
    DiffError::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
