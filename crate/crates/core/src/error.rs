use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree along a named axis.
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    /// A shape that cannot describe a tensor, or does not fit the data.
    InvalidShape(String),
    InvalidArgument {
        op: &'static str,
        reason: String,
    },
    /// A stored flat offset points outside the tensor it indexes.
    IndexOutOfRange {
        op: &'static str,
        offset: usize,
        len: usize,
    },
    NonFinite(String),
    MissingTensor(String),
    Validation(String),
    /// Failure reported by an external image or feature source.
    Source(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                op,
                axis,
                expected,
                found,
            } => write!(
                f,
                "{op}: shape mismatch on axis `{axis}`: expected {expected}, found {found}"
            ),
            Error::InvalidShape(msg) => write!(f, "invalid shape: {msg}"),
            Error::InvalidArgument { op, reason } => write!(f, "{op}: {reason}"),
            Error::IndexOutOfRange { op, offset, len } => {
                write!(f, "{op}: offset {offset} out of range for length {len}")
            }
            Error::NonFinite(ctx) => write!(f, "non-finite value: {ctx}"),
            Error::MissingTensor(name) => write!(f, "missing tensor `{name}`"),
            Error::Validation(msg) => write!(f, "weight validation failed: {msg}"),
            Error::Source(msg) => write!(f, "source error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

pub(crate) fn mismatch(op: &'static str, axis: &'static str, expected: usize, found: usize) -> Error {
    Error::ShapeMismatch {
        op,
        axis,
        expected,
        found,
    }
}
