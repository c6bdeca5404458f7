use std::path::PathBuf;

use masktx_tensor::checkpoint::CheckpointError;
use masktx_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at byte {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: usize,
        detail: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A caller-side precondition that does not hold.
    #[error("{0}")]
    Contract(String),

    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: usize, components: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
