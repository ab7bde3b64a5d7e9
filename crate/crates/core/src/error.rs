use std::fmt;
use std::io;

/// Errors produced anywhere in the laboratory.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    Shape { op: &'static str, detail: String },
    /// A value left the domain of a function (log of a non-positive number, ...).
    Domain { op: &'static str, detail: String },
    /// A non-finite value was produced or supplied.
    NonFinite { context: String },
    /// Caller supplied an invalid argument.
    InvalidArgument(String),
    /// Dataset labels are degenerate (fewer than two distinct classes).
    DegenerateLabels,
    /// An optimization loop produced a non-finite loss at the given step.
    Diverged { step: usize, detail: String },
    /// Binary file did not start with the expected magic bytes.
    BadMagic { expected: &'static str },
    /// Binary file ended early.
    Truncated { context: String },
    /// Header fields are inconsistent with the payload.
    Corrupt(String),
    /// Checkpoint type tag does not match the requested type.
    TypeTag { expected: String, found: String },
    /// Configuration could not be parsed or validated.
    Config(String),
    Io(io::Error),
    Csv(csv::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::DegenerateLabels => write!(f, "degenerate labels: need at least two classes"),
            Error::Diverged { step, detail } => {
                write!(f, "non-finite loss at step {step}: {detail}")
            }
            Error::BadMagic { expected } => write!(f, "bad magic (expected {expected:?})"),
            Error::Truncated { context } => write!(f, "truncated: {context}"),
            Error::Corrupt(msg) => write!(f, "corrupt file: {msg}"),
            Error::TypeTag { expected, found } => {
                write!(f, "type tag mismatch: expected {expected}, found {found}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Csv(e) => write!(f, "csv error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Csv(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
