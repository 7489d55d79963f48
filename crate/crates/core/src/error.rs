//! Crate-wide error type and the exit-code contract used by the CLI.

use std::fmt;

/// Errors emitted by the fusion kit.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or grid shapes do not conform to an operation's contract.
    Shape(String),
    /// An argument violates a documented precondition.
    InvalidArgument(String),
    /// Config file parsing or key validation failed.
    Config(String),
    /// Filesystem failure, wrapped with the offending path.
    Io(String),
    /// A numerical failure: divergence, NaN, or a violated runtime check.
    Numerical(String),
    /// Checkpoint decode failure or checkpoint/config incompatibility.
    Checkpoint(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    /// Process exit code for the CLI: 1 for usage/config problems, 2 for
    /// numerical failures. 0 is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Error {
        Error::Io(format!("{}: {err}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
