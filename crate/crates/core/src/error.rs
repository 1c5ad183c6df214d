use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
///
/// Variants group into three families that the command line maps onto
/// distinct exit codes: configuration/shape errors, data/file errors and
/// numeric faults.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence length {len} is not divisible by frame stack {stack} (remainder {remainder})")]
    NotDivisible {
        len: usize,
        stack: usize,
        remainder: usize,
    },

    #[error("stimuli underrun: no stimulus available for frame {frame}")]
    StimuliUnderrun { frame: usize },

    #[error("standard deviation of dimension {dim} is zero")]
    ZeroStd { dim: usize },

    #[error("unsupported format version {found} in {what} (expected {expected})")]
    Version {
        what: String,
        found: u32,
        expected: u32,
    },

    #[error("bad magic in {0}")]
    Magic(String),

    #[error("truncated record for sequence `{id}`: expected {expected} bytes, found {found}")]
    Truncated {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("record `{id}` disagrees with manifest: {detail}")]
    ManifestMismatch { id: String, detail: String },

    #[error("malformed data: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training fault at step {step} (batch {batch}): {detail}; sigma draws {sigmas:?}")]
    TrainingFault {
        step: u64,
        batch: u64,
        detail: String,
        sigmas: Vec<f64>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::NotDivisible { .. } => ErrorKind::Config,
            Error::NonFinite(_) | Error::TrainingFault { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
