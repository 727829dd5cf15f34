use std::fmt;

/// Crate-wide error type. Construction and kernel entry points validate their
/// inputs and return one of these instead of panicking.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch between tensors / parameters.
    Shape(String),
    /// An operation produced NaN or Inf, which violates the tensor contract.
    NonFinite { op: &'static str },
    /// Invalid configuration value or unparsable config text.
    Config(String),
    /// Weights container problems: bad magic, duplicate or unknown names, truncation.
    Weights(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Image decode/encode failure.
    Image(String),
    /// Invalid runtime input (boxes, sequences, frames).
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by `{op}`"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Weights(msg) => write!(f, "weights error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Image(msg) => write!(f, "image error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
        }
    }
}

// Display already folds the io cause into the message, so no source() here —
// error chains would print it twice.
impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
