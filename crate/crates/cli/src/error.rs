use thiserror::Error;

/// Failure of a command, classified by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(#[source] barrier_core::Error),
    #[error("data: {0}")]
    Data(#[source] barrier_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Model(_) => 2,
            CliError::Data(_) | CliError::Io { .. } | CliError::Csv(_) => 3,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<barrier_core::Error> for CliError {
    fn from(e: barrier_core::Error) -> Self {
        use barrier_core::Error as E;
        match e {
            E::Transport(_) | E::Model(_) | E::Capability(_) | E::VocabMismatch(_) => CliError::Model(e),
            E::InvalidInput(msg) => CliError::Config(msg),
            other => CliError::Data(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
