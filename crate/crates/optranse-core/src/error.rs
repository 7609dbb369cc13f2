//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by loading, preprocessing, training, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corruption sampling exhausted for relation {relation} after {attempts} attempts")]
    SamplingExhausted { relation: String, attempts: usize },

    #[error("relation {relation} has no training statistics; category unavailable")]
    CategoryUnavailable { relation: String },

    #[error("unknown label '{label}'; nearest known labels: {}", suggestions.join(", "))]
    UnknownLabel {
        label: String,
        suggestions: Vec<String>,
    },

    #[error("cache fingerprint mismatch: file was built for graph {found:#018x}, current graph is {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/cache, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
