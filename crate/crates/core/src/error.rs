use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum SohotError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An explicit tensor would need more coefficients than the configured cap.
    #[error("capacity exceeded: {what} requires {required} coefficients (cap {cap})")]
    Capacity { what: String, required: String, cap: u64 },

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SohotError>;

impl SohotError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        SohotError::Argument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SohotError::Shape(msg.into())
    }
}
