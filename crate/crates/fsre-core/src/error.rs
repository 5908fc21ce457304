use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structural problems in a dataset file, naming the offending
    /// relation/record where one is known.
    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    /// A well-formed record that violates an invariant (span bounds etc.).
    #[error("validation error: {context}: {message}")]
    Validation { context: String, message: String },

    /// Line-oriented formats (concept TSV, embedding text files).
    #[error("format error in {path} line {line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("episode sampling failed for relation {relation}: {message}")]
    Episode { relation: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("encoding error: {0}")]
    Encode(String),

    #[error("non-finite loss at training episode {episode} (root seed {seed})")]
    NonFiniteLoss { episode: usize, seed: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn validation(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
