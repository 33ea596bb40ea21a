//! Error type shared across the crate.

use std::fmt;

/// Errors surfaced by tensor ops, model assembly, data generation, and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    Shape(String),
    /// Invalid configuration value (head count, token count, enum tag, ...).
    Config(String),
    /// Non-finite value encountered where finiteness is required.
    Numeric(String),
    /// Autoregressive rollout produced a non-finite state; carries the step index.
    Divergence { step: usize },
    /// Ground-truth simulation became unstable (energy growth beyond bound).
    Unstable(String),
    /// File format violation (bad magic, truncated record, version mismatch).
    Format(String),
    /// Wrapped I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Config(m) => write!(f, "invalid config: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Divergence { step } => {
                write!(f, "rollout diverged: non-finite state at step {step}")
            }
            Error::Unstable(m) => write!(f, "simulation unstable: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
