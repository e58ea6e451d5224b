use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Diagnostics carry enough context (shapes, offsets,
/// versions, paths) to identify the failing call site without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {lhs:?} vs right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("variable {index} is not a leaf of this graph")]
    NotALeaf { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("detector is not fitted: {0}")]
    NotFitted(&'static str),

    #[error("score lists must be nonempty ({0})")]
    EmptyScores(&'static str),

    #[error("covariance matrix singular even after jitter {jitter:e} on layer {layer}")]
    SingularCovariance { layer: String, jitter: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic at offset {offset}: expected {expected}, found {found}")]
    BadMagic {
        path: PathBuf,
        offset: u64,
        expected: String,
        found: String,
    },

    #[error("{path}: unsupported container version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated or corrupt at offset {offset}: {detail}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("validation/test contamination: {0}")]
    SplitContamination(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
