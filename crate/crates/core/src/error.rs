use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid record: {0}")]
    Record(String),

    #[error("prompt pool is empty")]
    EmptyPool,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid action {action}: {reason}")]
    InvalidAction { action: usize, reason: &'static str },

    #[error("query text is empty")]
    EmptyQuery,

    #[error("episode already terminated")]
    Terminal,

    #[error("episode has not terminated (t={t}, m={m})")]
    NotTerminal { t: usize, m: usize },

    #[error("every action is masked")]
    AllMasked,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("embedding for pool entry {id}: {source}")]
    Encode { id: usize, source: Box<Error> },

    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps the error with a location such as `epoch 3, batch 7`.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error, looking through `Context` and `Encode` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } | Error::Encode { source, .. } => source.root(),
            other => other,
        }
    }
}
