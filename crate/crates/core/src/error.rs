use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("example {id:?}: {message}")]
    InvalidExample { id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("composition failed: {0}")]
    Compose(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoints are not comparable: {0}")]
    ConfigMismatch(String),

    #[error("{0}")]
    Precondition(String),

    #[error("writing training outputs failed (training completed: {training_completed}): {message}")]
    Persist { training_completed: bool, message: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MalformedRecord { .. }
                | Error::InvalidExample { .. }
                | Error::Config(_)
                | Error::ConfigMismatch(_)
                | Error::Precondition(_)
        )
    }
}
