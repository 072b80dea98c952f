//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by the public API. Shape mismatches inside the numeric
/// primitives are programming errors and panic instead.
#[derive(Debug)]
pub enum Error {
    /// Invalid model or run configuration.
    Config(String),
    /// API misuse: missing inputs, mismatched lengths, unknown kinds.
    Usage(String),
    /// A NaN or infinity showed up where finite math was required.
    /// Carries a description of what was poisoned (e.g. a parameter name).
    NonFinite(String),
    /// Malformed checkpoint or data file.
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
