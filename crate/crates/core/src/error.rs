use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that must agree do not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A constructor received data whose length does not match the shape.
    DataLength { expected: usize, got: usize },
    /// An index (token id, class id, ...) is outside its valid range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// A configuration value violates its documented constraint.
    Config(String),
    /// A numeric guard tripped: non-finite value where finiteness is required.
    NonFinite { context: String },
    /// Input data is malformed (datasets, checkpoints, report files).
    Data(String),
    /// Wrapped I/O failure, tagged with the path involved.
    Io { path: String, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Self::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Self::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what} {index} out of range (< {bound} required)")
            }
            Self::Config(msg) => write!(f, "invalid config: {msg}"),
            Self::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Self::Data(msg) => write!(f, "malformed data: {msg}"),
            Self::Io { path, message } => write!(f, "io error on {path}: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    /// Stable one-word category for machine-readable CLI output.
    pub fn category(&self) -> &'static str {
        match self {
            Self::ShapeMismatch { .. } | Self::DataLength { .. } | Self::IndexOutOfRange { .. } => {
                "shape"
            }
            Self::Config(_) => "config",
            Self::NonFinite { .. } => "numeric",
            Self::Data(_) => "data",
            Self::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
