use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("backward requires a completed forward pass ending in a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward called before any forward operation was recorded")]
    BackwardBeforeForward,

    #[error("backward already ran on this tape; re-run the forward pass first")]
    DoubleBackward,

    #[error("invalid argument to `{op}`: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, DiffError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Shape {
        op,
        detail: detail.into(),
    }
}
