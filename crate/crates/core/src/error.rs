use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum FcosError {
    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value produced by layer {layer} ({stage})")]
    NumericFailure { layer: String, stage: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("unit {id} cannot be removed: {reason}")]
    Unremovable { id: usize, reason: String },

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("artifact hash mismatch for {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FcosError {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        FcosError::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FcosError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = FcosError> = std::result::Result<T, E>;
