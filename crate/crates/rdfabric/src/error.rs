//! Crate-wide error type and process exit-code mapping.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad or contradictory configuration (unknown keys, unparsable values,
    /// out-of-range hyperparameters).
    #[error("config error: {0}")]
    Config(String),

    /// Refusal to overwrite an existing non-empty output location.
    #[error("output path {path:?} already exists and is not empty (pass --overwrite to replace it)")]
    Clobber { path: PathBuf },

    /// Dataset layout violations: missing `train/good`, duplicate class
    /// names, empty splits and the like.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Unsatisfied evaluation preconditions (single-class score sets, missing
    /// ground-truth masks, empty map collections).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// An input image that could not be read or decoded.
    #[error("failed to decode image {path:?}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// A readable input image that is nevertheless unusable, e.g. smaller
    /// than one patch.
    #[error("unusable input {path:?}: {message}")]
    Input { path: PathBuf, message: String },

    #[error("io error on {path:?}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or mismatched checkpoint / weight archives.
    #[error("archive error: {0}")]
    Archive(String),

    /// Checksum disagreement on teacher weights or stored tensors.
    #[error("{what}: checksum mismatch (expected {expected}, got {actual})")]
    Checksum {
        what: String,
        expected: String,
        actual: String,
    },

    /// Tensor shape contract violations on public operations.
    #[error("shape error in {op}: {message}")]
    Shape { op: &'static str, message: String },

    /// Training-time failures: divergence, exhausted wall-clock budget.
    #[error("training error: {0}")]
    Train(String),

    /// Another exclusive benchmark run holds the lock.
    #[error("benchmark lock is held: {0}")]
    Busy(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 dataset, 4 evaluation
    /// preconditions, 5 unreadable or unusable input image, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Clobber { .. } => 2,
            Error::Dataset(_) => 3,
            Error::Eval(_) => 4,
            Error::Image { .. } | Error::Input { .. } => 5,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
