use std::path::PathBuf;

use dlf_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid parameter {name}: {msg}")]
    Parameter { name: String, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("activation cache is stale: {0}")]
    CacheInvalid(&'static str),
    #[error("{what} did not converge (relative residual {residual:e})")]
    NotConverged { what: &'static str, residual: f64 },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("unknown operator {0:?}")]
    UnknownOperator(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dimension(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn param_err(name: &str, msg: impl Into<String>) -> Error {
    Error::Parameter {
        name: name.to_string(),
        msg: msg.into(),
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
