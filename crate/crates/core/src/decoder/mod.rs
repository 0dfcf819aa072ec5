//! Greedy decoding and CTC prefix beam search with character LM fusion.

mod beam;
mod greedy;
mod lm;

pub use beam::{beam_search, beam_search_decode, prefix_score, BeamConfig, BeamHypothesis};
pub use greedy::{argmax_path, greedy_decode, greedy_decode_grams};
pub use lm::{train_char_lm, CharLm, LM_BOUNDARY, DEFAULT_LM_K, DEFAULT_LM_ORDER};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid LM order {0}: must be at least 1")]
    InvalidOrder(usize),
    #[error("invalid smoothing constant {0}: must be positive and finite")]
    InvalidSmoothing(f64),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("character {0:?} is outside the LM vocabulary")]
    UnknownChar(char),
    #[error("beam width must be at least 1")]
    InvalidBeam,
    #[error("malformed LM file, line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
