use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is not attached to any tensor that requires grad")]
    DetachedLoss,
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what} must be nonempty")]
    Empty { what: &'static str },
    #[error("probability {value} outside [0, 1] in {what}")]
    NotAProbability { what: &'static str, value: f64 },
    #[error("target-class score {value} leaves a degenerate denominator")]
    DegenerateDenominator { value: f64 },
    #[error("invalid simplex point: {0}")]
    InvalidSimplex(String),
    #[error("grid has {points} points, limit is {limit}")]
    GridTooLarge { points: u128, limit: u128 },
    #[error("non-invertible transform (determinant {det})")]
    NonInvertible { det: f64 },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
