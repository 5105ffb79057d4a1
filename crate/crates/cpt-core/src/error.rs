//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by checkpoint serialization and deserialization.
///
/// Each failure mode is a distinct variant so callers can tell a file that
/// was never a checkpoint from one that is merely incompatible.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {section}")]
    Truncated { section: &'static str },
    #[error("checkpoint tensor `{name}`: expected shape {expected:?}, file has {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint tensor `{name}`: stored as {found}, loading as {expected}")]
    Dtype {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("checkpoint is missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was handed tensors whose shapes do not fit its contract.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is invalid or inconsistent with another.
    #[error("configuration: {0}")]
    Config(String),

    /// Graph construction failed (for example `k >= n`).
    #[error("graph: {0}")]
    Graph(String),

    /// A text file (points, labels, manifest, config) failed to parse.
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    /// Dataset-level failure (degenerate cloud, impossible split, ...).
    #[error("data: {0}")]
    Data(String),

    /// An op produced or was handed a NaN or infinity. Tape ops raise this
    /// only when debug assertions are enabled (release builds detect
    /// divergence at the loss value instead); graph construction raises it
    /// unconditionally, since distances cannot be ordered otherwise.
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Training reached a non-finite loss or parameter.
    #[error("training diverged to a non-finite value at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarBackward { numel: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
