use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration engine.
#[derive(Debug, Error)]
pub enum OfgError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {left:?} vs {right:?}")]
    GridMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("buffer length {actual} does not match grid voxel count {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("coordinates {coords:?} out of bounds for dims {dims:?}")]
    OutOfBounds {
        coords: [usize; 3],
        dims: [usize; 3],
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("optimizer diverged at step {step}: energy trace {trace:?}")]
    Divergence { step: usize, trace: Vec<f64> },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<OfgError>,
    },

    #[error("format error in {path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Structured description of a malformed container file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error(
        "bad magic at offset 0: expected \"{}\", found \"{}\" {found:?}",
        escape(expected),
        escape(found)
    )]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} at offset 4 (expected {expected})")]
    BadVersion { expected: u32, found: u32 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("dtype {found} at offset {offset} does not match expected {expected}")]
    BadDtype {
        offset: usize,
        expected: u32,
        found: u32,
    },

    #[error("invalid header field at offset {offset}: {reason}")]
    BadHeader { offset: usize, reason: String },

    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingData { expected: usize, actual: usize },
}

fn escape(bytes: &[u8; 4]) -> String {
    bytes.escape_ascii().to_string()
}

impl OfgError {
    pub fn context(self, context: impl Into<String>) -> Self {
        OfgError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &OfgError {
        match self {
            OfgError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            OfgError::Divergence { .. } | OfgError::NonFinite { .. }
        )
    }
}

pub type Result<T, E = OfgError> = std::result::Result<T, E>;
