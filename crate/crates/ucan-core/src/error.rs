//! Crate-wide error type with process exit-code mapping.

use thiserror::Error;

/// Errors surfaced by the library. Each variant maps onto one of the
/// documented process exit codes: 2 configuration, 3 data, 4 numeric.
#[derive(Debug, Error)]
pub enum UcanError {
    /// Invalid or inconsistent configuration (bad hyper-parameter ranges,
    /// unknown ablation tags, contract violations in requested operations).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file content; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Structurally invalid data (empty logs, vocabulary mismatches,
    /// missing users, incompatible checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Filesystem failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint container violations (magic, version, truncation).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Tensor dimension disagreement between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values or numerical divergence during optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl UcanError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            UcanError::Config(_) => 2,
            UcanError::Parse { .. }
            | UcanError::Data(_)
            | UcanError::Io(_)
            | UcanError::Checkpoint(_)
            | UcanError::Shape(_) => 3,
            UcanError::Numeric(_) => 4,
        }
    }
}
