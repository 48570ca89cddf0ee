use std::path::PathBuf;

use rap_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum RapError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("config: unknown key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String },

    #[error("config: unknown section [{0}]")]
    UnknownSection(String),

    #[error("config: bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },

    #[error("config: line {line}: {reason}")]
    Syntax { line: usize, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("cifar binary: {reason} at byte offset {offset}")]
    Cifar { offset: u64, reason: String },

    #[error("episode: {0}")]
    Episode(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite or exploding {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at iteration {iteration}: {what} = {value}")]
    Diverged {
        iteration: usize,
        what: &'static str,
        value: f64,
        last_good: Option<Box<crate::trainer::Checkpoint>>,
    },
}

pub type Result<T> = std::result::Result<T, RapError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RapError {
    let path = path.into();
    move |source| RapError::Io { path, source }
}
