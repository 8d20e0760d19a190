use thiserror::Error;

use crate::config::ConfigError;
use crate::corpus::CorpusError;
use crate::ctc::CtcError;
use crate::eval::EvalError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;
use crate::train::TrainError;

/// Any failure raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

pub type Result<T> = std::result::Result<T, Error>;
