use std::path::PathBuf;

use mce_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("class {class} has {available} samples, episode needs {needed}")]
    InsufficientSamples {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl MceError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        MceError::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MceError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MceError>;
