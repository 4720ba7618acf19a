//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum. The CLI maps variants onto process exit codes
/// (config errors → 2, numeric failures → 3, I/O and parse errors → 4).
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter violates an operation's preconditions.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Tensor shapes are inconsistent.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric-domain failure (degenerate covariance, non-finite value).
    /// The message carries provenance such as the offending state index.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An operation was asked to reduce over an empty selection.
    #[error("undefined input: {0}")]
    UndefinedInput(String),

    /// Run-configuration validation failures; every violated constraint is
    /// listed, not just the first.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    /// A malformed record in a line-oriented file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI should report for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) | Error::Config(_) => 2,
            Error::Numeric(_) | Error::UndefinedInput(_) | Error::Shape(_) => 3,
            Error::Parse { .. } | Error::Io(_) => 4,
        }
    }
}
