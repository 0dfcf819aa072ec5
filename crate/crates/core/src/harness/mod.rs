//! Experiment plumbing: metrics, synthetic data, manifests and config files.

mod config;
mod manifest;
mod metrics;
mod synth;

pub use config::{parse_config, ConfigError, ExperimentConfig, Precision, CONFIG_KEYS};
pub use manifest::{load_manifest, read_wav, write_wav, DatasetManifest, ManifestEntry, Split};
pub use metrics::{cer, char_errors, edit_distance, score_corpus, wer, word_errors, words, MetricsReport, SliceMetrics};
pub use synth::{
    gen_synthetic_dataset, signatures, synth_spectrogram_config, Signature, SynthConfig, SyntheticDataset,
    SYNTH_BINS, SYNTH_SAMPLE_RATE,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("undefined rate: empty reference")]
    UndefinedRate,
    #[error("invalid synthetic dataset config: {0}")]
    InvalidSynth(String),
    #[error("manifest {path}, line {line}: {reason}")]
    Manifest { path: String, line: usize, reason: String },
    #[error("wav {path}: {reason}")]
    Wav { path: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
