use std::io;

use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("uninitialized state: {0}")]
    Uninitialized(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unknown name `{name}`; expected one of: {options}")]
    UnknownName { name: String, options: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
