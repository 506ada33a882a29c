use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}

/// Failures raised by tokenizer/embedder/summarizer/generator/scorer backends.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),

    #[error("request timed out after {elapsed_ms} ms")]
    Timeout { elapsed_ms: u64 },

    #[error("remote returned HTTP {status}")]
    Http { status: u16 },

    #[error("response does not match wire schema: {0}")]
    SchemaMismatch(String),

    #[error("input of {tokens} tokens exceeds backend budget of {limit}")]
    OverBudget { tokens: usize, limit: usize },

    #[error("backend failed: {0}")]
    Failed(String),
}

impl BackendError {
    /// Whether repeating the same request may succeed.
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout { .. } => true,
            BackendError::Http { status } => *status >= 500 || *status == 429,
            BackendError::SchemaMismatch(_)
            | BackendError::OverBudget { .. }
            | BackendError::Failed(_) => false,
        }
    }
}
