use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DetachedNode,
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("batch normalization in training mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite gradient for parameter {0}; step aborted")]
    NonFiniteGradient(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}
