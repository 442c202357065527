use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("gradient check failed at index {index}: non-finite objective")]
    CheckFailed { index: usize },

    /// `stage` says where the non-finite values appeared, e.g. "at batch 3".
    #[error("training diverged on client {client}: non-finite values {stage}")]
    TrainingDiverged { client: usize, stage: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("wire protocol error: {0}")]
    Wire(#[from] crate::wire::WireError),

    #[error("bank parse error: {0}")]
    Bank(#[from] crate::datastore::BankError),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn mismatch(expected: usize, actual: usize, context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected,
            actual,
            context: context.into(),
        }
    }
}
