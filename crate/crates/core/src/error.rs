use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        node: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("client {0} holds no samples")]
    EmptyShard(usize),

    #[error("zero deviation norm for mask {0}")]
    ZeroDeviation(usize),

    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: &'static str },

    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u32 },

    #[error("truncated {what}")]
    Truncated { what: &'static str },

    #[error("format error: {0}")]
    Format(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            node: node.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::ZeroDeviation(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
