use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CcdError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("zero valid records in {0}")]
    NoRecords(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("block {0} has zero interactions")]
    EmptyBlock(usize),
    #[error("index {index} out of range for {what} (size {size})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("variant mismatch: snapshot holds {found}, expected {expected}")]
    VariantMismatch { expected: String, found: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at {side:?} row {row}")]
    NonFiniteGradient { side: crate::model::Side, row: usize },
    #[error("proxies already updated for block {0}")]
    DoubleProxyUpdate(usize),
    #[error("stage order violated: {0}")]
    StageOrder(String),
    #[error("snapshot format: {0}")]
    SnapshotFormat(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
}

pub type Result<T> = std::result::Result<T, CcdError>;

impl CcdError {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CcdError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
