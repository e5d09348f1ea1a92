use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("position {pos} out of range for sentence of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },

    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    UnknownTokenId { id: u32, size: usize },

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: String,
        got: usize,
        expected: usize,
    },

    #[error("model lacks capability `{0}`")]
    Capability(&'static str),

    /// Retryable failure talking to an external model process.
    #[error("transport: {0}")]
    Transport(String),

    /// The model answered, but with an error payload.
    #[error("model error: {0}")]
    Model(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("data format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
