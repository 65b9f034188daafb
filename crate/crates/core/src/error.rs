use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied something the operation's contract rejects.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("utterance {id}: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    /// Validation failures (bad input, config, or file contents) as opposed to
    /// failures while running a stage.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::InvalidInput(_) | Self::Shape(_) | Self::Parse { .. } | Self::Config(_) => true,
            Self::Format(_) | Self::Io { .. } => false,
            Self::Utterance { source, .. } => source.is_validation(),
            Self::Stage { .. } => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
