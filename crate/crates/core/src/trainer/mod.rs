//! SGD training with a SortaGrad curriculum, loss schedules and the
//! finite-difference gradient checker.

mod gradcheck;
mod optim;
mod train;

pub use gradcheck::{grad_check, grad_check_all, grad_check_with_fault, GradCheckReport, COMPONENTS, DEFAULT_EPS};
pub use optim::{global_norm, mix, sgd_nesterov_step, sortagrad_order, StepInfo};
pub use train::{
    decode_utterance, evaluate, reference_alignments, train, DecodeHead, Example, LossSchedule, RunLog,
    RunRecord, TrainConfig, TrainData,
};

use thiserror::Error;

use crate::frontend::FrontendError;
use crate::losses::LossError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("divergence detected: non-finite gradient")]
    Divergence,
    #[error("unknown gradient-check component {0:?}")]
    UnknownComponent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
}
