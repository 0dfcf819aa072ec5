//! Layer primitives with exact analytic gradients.
//!
//! Sequences are `T × D` matrices (one row per timestep). Convolution inputs
//! flatten `(frequency, channel)` into the row with channel fastest.

mod batchnorm;
mod conv;
mod dense;
mod gru;
mod lookahead;

pub use batchnorm::{batchnorm_backward, batchnorm_seq, BatchNorm, BatchNormCache, BN_EPSILON};
pub use conv::{conv2d, conv2d_backward, conv2d_frame, Conv2dParams, Conv2dSpec};
pub use dense::{
    fully_connected, fully_connected_backward, log_softmax, log_softmax_backward, relu,
    log_softmax_row, relu_backward, softmax, softmax_backward, DenseParams,
};
pub use gru::{
    bgru, bgru_backward, chunk_starts, chunked_bidirectional, chunked_bidirectional_backward,
    gru_layer, gru_layer_backward, gru_recurrence, gru_recurrence_backward, gru_step,
    gru_step_backward, lc_bgru, lc_bgru_backward, run_bgru_as_lc_bgru, BgruCache, ChunkedCache,
    Direction, GruParams, GruStepCache, LcBgruCache, LcBgruConfig, LcBgruParams, RecurrenceCache,
};
pub use lookahead::{la_conv, la_conv_backward, la_conv_frame, LaConvParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayerError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("insufficient samples for batch statistics: {0} < 2")]
    InsufficientSamples(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Batch-norm behaviour: batch statistics (train) or running statistics (eval).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
