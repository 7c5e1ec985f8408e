use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("integration diverged at t={time:e} (last stable time {last_stable:e}, |q|_inf={norm:e})")]
    Diverged { time: f64, last_stable: f64, norm: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("missing prerequisite {path}: run `{subcommand}` first")]
    MissingPrerequisite { path: PathBuf, subcommand: &'static str },

    #[error("artifact {path} was produced with config hash {found}, current config hashes to {expected}; rerun `{subcommand}`")]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
        subcommand: &'static str,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidParam(_) => 2,
            Error::MissingPrerequisite { .. } | Error::HashMismatch { .. } => 4,
            Error::Io { .. } | Error::Format { .. } => 1,
            _ => 3,
        }
    }
}
