//! Sequence losses over log-probability matrices (`T × V`, blank at 0).
//!
//! Every loss returns its gradient with respect to the log-probabilities;
//! chain through [`crate::layers::log_softmax_backward`] to reach logits.

mod ce;
mod ctc;
mod gram;
mod lattice;
mod xcorr;

pub use ce::{
    ce_alignment_loss, joint_loss, Head, JointLoss, LossTerm, DEFAULT_JOINT_WEIGHTS, MIX1_WEIGHTS,
};
pub use ctc::{collapse, ctc_lattice, ctc_loss, min_frames, viterbi_align, Alignment};
pub use gram::{build_gram_lattice, gram_greedy_collapse, gramctc_loss, GramLattice, GramSet, GramState};
pub use lattice::Lattice;
pub use xcorr::{alignment_xcorr, nonblank_indicator, shift_alignment, XCorr};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("label too long for input: {frames} frames, at least {required} required")]
    LabelTooLong { frames: usize, required: usize },
    #[error("uncoverable label: no gram covers {0:?}")]
    UncoverableLabel(String),
    #[error("alignment mismatch: {got} frames, expected {expected}")]
    AlignmentMismatch { got: usize, expected: usize },
    #[error("empty alignment: {0} has no non-blank frames")]
    EmptyAlignment(&'static str),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid gram set: {0}")]
    InvalidGramSet(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("width mismatch: log-probs have {got} columns, expected {expected}")]
    WidthMismatch { got: usize, expected: usize },
}
