use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or Inf, or was fed non-finite data.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A caller-supplied parameter is out of its documented range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An API contract was violated (mismatched names, non-normalized rows, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The object is not in a state that allows the requested operation.
    #[error("invalid state: {0}")]
    State(String),

    /// A file did not parse as the expected format.
    #[error("format error in {path:?} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: usize,
        detail: String,
    },

    #[error("config error at {path:?} line {line}: {detail}")]
    Config {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub fn param(detail: impl Into<String>) -> Self {
        Error::Param(detail.into())
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn state(detail: impl Into<String>) -> Self {
        Error::State(detail.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Shorthand for [`Error::shape`].
pub fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::shape(op, detail)
}

pub type Result<T> = std::result::Result<T, Error>;
