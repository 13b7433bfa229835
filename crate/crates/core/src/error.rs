//! Error type shared across the library.

use std::fmt;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by pipeline operations.
///
/// Variants are grouped by contract: shape/dimension violations, bad numeric
/// domains, missing or mismatched references, degenerate inputs that cannot
/// be normalized, and I/O or configuration failures.
#[derive(Debug)]
pub enum Error {
    /// Array shapes do not chain (e.g. keypoint counts differ).
    Dimension(String),
    /// A value is outside its numeric domain (non-finite, out of range).
    Domain(String),
    /// A reference (neutral face, identity) is missing or mismatched.
    Reference(String),
    /// Normalization or direction extraction is degenerate (zero scale).
    Degenerate(String),
    /// Sequence lengths that must agree do not.
    Alignment(String),
    /// Not enough data to compute the requested quantity.
    InsufficientData(String),
    /// Sequence exceeds a configured capacity (e.g. positional table).
    Capacity(String),
    /// Invalid configuration or missing model artifact.
    Config(String),
    /// Malformed file contents.
    Format(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Reference(msg) => write!(f, "reference error: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::Alignment(msg) => write!(f, "alignment error: {msg}"),
            Error::InsufficientData(msg) => write!(f, "insufficient data: {msg}"),
            Error::Capacity(msg) => write!(f, "capacity error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
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

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}
