use std::io;
use std::path::PathBuf;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{0}")]
    Config(String),

    #[error("bundle {path}: {msg}")]
    Bundle { path: PathBuf, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("negative value {value} in network feature `{feature}`")]
    NegativeNetworkValue { feature: String, value: f64 },

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("sample of {len} steps is shorter than two windows of {window}")]
    ShortSample { len: usize, window: usize },

    #[error("non-finite loss at update {update}")]
    NonFiniteLoss { update: usize },

    #[error(transparent)]
    Model(#[from] stmformer_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}
