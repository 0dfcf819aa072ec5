//! Layer stacks, presets, lookahead budgets and checkpoints.

mod checkpoint;
mod network;
mod spec;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointMeta, LoadReport, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use network::{
    ConvBlock, ForwardOutput, Model, ModelCache, ModelGrads, ModelParams, Recurrent, StackOutput,
};
pub use spec::{lookahead_frames, FrontendKind, Lookahead, ModelSpec, Preset, RecurrentKind, Scale, DESK_WIDTH, PAPER_WIDTH};

use thiserror::Error;

use crate::frontend::FrontendError;
use crate::layers::LayerError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("feature shape error: expected {expected} bins, got {got}")]
    FeatureShape { got: usize, expected: usize },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error("checkpoint checksum failure: {0}")]
    Checksum(String),
    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint spec incompatible with requested spec: {0}")]
    SpecMismatch(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}
