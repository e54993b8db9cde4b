use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: failed to decode image: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: unsupported image: {detail}")]
    UnsupportedImage { path: PathBuf, detail: String },

    #[error("image has a zero dimension ({height}x{width})")]
    EmptyImage { height: usize, width: usize },

    #[error("value {0} is outside [0, 255]")]
    OutOfRange(f64),

    #[error("non-finite input")]
    NonFinite,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model count mismatch: expected {expected}, got {actual}")]
    ModelCountMismatch { expected: usize, actual: usize },

    #[error("key arity {actual} does not match {expected} models")]
    KeyArity { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no matching file for {name} in {dir}")]
    Unmatched { name: String, dir: PathBuf },

    #[error("malformed LUT: {0}")]
    MalformedLut(String),

    #[error("unsupported LUT version {0}")]
    LutVersion(u64),

    #[error("simplex violation: {0}")]
    SimplexViolation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the caller's inputs disagreeing with each
    /// other or with a contract, as opposed to I/O and decoding failures.
    pub fn is_contract_violation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Decode { .. } | Error::UnsupportedImage { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
