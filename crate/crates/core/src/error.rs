use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Input file does not parse under its declared format.
    #[error("malformed input: {0}")]
    Format(String),

    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A compressed frame or checkpoint failed an integrity check.
    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("model checksum mismatch: frame expects {expected:016x}, model has {actual:016x}")]
    ChecksumMismatch { expected: u64, actual: u64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Corrupt(_) | Error::ChecksumMismatch { .. } => 3,
            Error::Io(_) => 1,
            Error::Numerical(_) => 1,
            Error::Format(_) | Error::Invalid(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

pub(crate) fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Corrupt(msg.into()))
}
