use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition was not met; the message names it.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("cannot stratify: {0}")]
    Stratification(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
