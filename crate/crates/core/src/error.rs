use thiserror::Error;

use crate::numcore::NumError;

/// Architecture and forward-pass failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("inconsistent sizes: {0}")]
    Size(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data error: {0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupted or truncated file: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        TrainError::Model(ModelError::Num(e))
    }
}
