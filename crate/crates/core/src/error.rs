use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch-size error: {0}")]
    BatchSize(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr = {lr}); learning rate too high?")]
    NonFinite {
        loss: f64,
        epoch: usize,
        batch: usize,
        lr: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
