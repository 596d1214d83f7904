//! Error type shared across the library.
//!
//! Errors fall into three classes that the command line maps to exit codes:
//! usage errors (bad arguments), data errors (unreadable or malformed
//! inputs), and numeric errors (non-finite values, degenerate batches,
//! undefined metrics).

use std::fmt;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Caller passed an argument outside the documented domain.
    InvalidArgument(String),
    /// An input file or record could not be read or parsed.
    Data(String),
    /// A computation produced or received non-finite values, or a
    /// quantity (loss, metric) is undefined for the given input.
    Numeric(String),
    /// Underlying I/O failure, tagged with the path involved.
    Io(String, std::io::Error),
}

impl Error {
    /// Exit code class: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Data(_) | Error::Io(..) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(path, err) => write!(f, "io error: {path}: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(_, err) => Some(err),
            _ => None,
        }
    }
}
