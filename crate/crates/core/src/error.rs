use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("invalid world spec: {0}")]
    InvalidWorld(String),

    #[error("concept `{0}` has zero coverage")]
    ZeroCoverage(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("optimizer diverged at step {step}")]
    Diverged { step: usize, trajectory: Vec<f64> },

    #[error("config parse error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("image codec: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
