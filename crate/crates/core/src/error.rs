//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the segmentation library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent on-disk data (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Array or volume dimensions incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dims(String),

    /// An operation was called outside its contract (wrong kind, wrong mode, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A numeric argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Region statistics could not be computed.
    #[error("statistics error: {0}")]
    Stats(String),

    /// A stateful operation was invoked without the state it needs.
    #[error("state error: {0}")]
    State(String),

    /// The optimizer hit a non-finite quantity.
    #[error("optimizer error: {0}")]
    Optim(String),

    /// Invalid run or phantom configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Evaluation could not proceed (empty ground truth, ...).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Training aborted.
    #[error("training error: {0}")]
    Train(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
