use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the toolkit.
///
/// Every variant belongs to one of four classes (see [`ErrorClass`]) which the
/// command-line front end maps onto its exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("channel mismatch: expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("{what} is empty")]
    Empty { what: &'static str },

    #[error("image too small: {found} (minimum {min}x{min} for the requested scales)")]
    TooSmall { min: usize, found: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("decode error{} at byte {offset}: {reason}", path_suffix(path))]
    Decode {
        path: Option<PathBuf>,
        offset: usize,
        reason: String,
    },

    #[error("payload length mismatch{}: expected {expected} bytes, found {actual}", path_suffix(path))]
    PayloadLength {
        path: Option<PathBuf>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite value: {context}")]
    NonFinite { context: String },
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" in {}", p.display()),
        None => String::new(),
    }
}

/// Coarse error classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Shape,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument { .. } | Error::Empty { .. } | Error::TooSmall { .. } => {
                ErrorClass::Validation
            }
            Error::Io { .. } | Error::Decode { .. } | Error::PayloadLength { .. } => ErrorClass::Io,
            Error::ChannelMismatch { .. } | Error::ShapeMismatch { .. } => ErrorClass::Shape,
            Error::NonFiniteGradient { .. } | Error::NonFinite { .. } => ErrorClass::Numeric,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: (usize, usize), found: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            context,
            expected: format!("{}x{}", expected.0, expected.1),
            found: format!("{}x{}", found.0, found.1),
        }
    }
}
