use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("size error: need {needed} records, have {available}")]
    Size { needed: usize, available: usize },

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no misclassified starting point found after {attempts} attempts")]
    NoAdversarialFound { attempts: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
