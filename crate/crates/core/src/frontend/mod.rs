//! Audio to features: power/log spectrograms, trainable PCEN, static feature
//! normalization and the noise/reverberation augmentation pipeline.

mod augment;
mod normalize;
mod pcen;
mod spectrogram;

pub use augment::{augment_noise, augment_rir, convolve_truncated, noise_gain, synth_rir, ImpulseResponse};
pub use normalize::{feature_normalize, FeatureStats, NORMALIZE_EPSILON};
pub use pcen::{
    pcen_backward, pcen_forward, pcen_smoother, pcen_smoother_with, PcenCache, PcenChannels,
    PcenInit, PcenParams, PcenState, DEFAULT_PCEN_EPSILON,
};
pub use spectrogram::{
    compute_log_spectrogram, compute_power_spectrogram, log_compress, Spectrogram,
    SpectrogramConfig, SpectrogramExtractor, LOG_FLOOR,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("utterance too short: {samples} samples < window of {window}")]
    TooShort { samples: usize, window: usize },
    #[error("invalid smoother coefficient {0} (must lie in (0, 1))")]
    InvalidSmoother(f64),
    #[error("numeric overflow in PCEN at frame {frame}, bin {bin}")]
    PcenOverflow { frame: usize, bin: usize },
    #[error("cache mismatch: gradient is {got:?}, cache expects {expected:?}")]
    CacheMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("undefined SNR: {0} has zero power")]
    UndefinedSnr(&'static str),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bin count mismatch: {got} vs {expected}")]
    BinMismatch { got: usize, expected: usize },
}

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioUtterance {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub transcript: Option<String>,
}

impl AudioUtterance {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FrontendError> {
        let a = Self {
            samples,
            sample_rate,
            transcript: None,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn with_transcript(mut self, text: impl Into<String>) -> Self {
        self.transcript = Some(text.into());
        self
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        if self.sample_rate == 0 {
            return Err(FrontendError::InvalidAudio("sample rate must be positive".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(FrontendError::InvalidAudio(format!("non-finite sample at {i}")));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn from_pcm16(pcm: &[i16], sample_rate: u32) -> Self {
        Self {
            samples: pcm.iter().map(|&s| pcm16_to_f64(s)).collect(),
            sample_rate,
            transcript: None,
        }
    }

    /// Clamps to `[-1, 1]` and quantizes to 16-bit PCM.
    pub fn to_pcm16(&self) -> Vec<i16> {
        self.samples.iter().map(|&s| f64_to_pcm16(s)).collect()
    }

    /// Round trip through PCM16, as a network client would deliver it.
    pub fn quantized(&self) -> Self {
        Self {
            samples: self.to_pcm16().into_iter().map(pcm16_to_f64).collect(),
            sample_rate: self.sample_rate,
            transcript: self.transcript.clone(),
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
            transcript: self.transcript.clone(),
        }
    }
}

#[inline]
pub fn pcm16_to_f64(s: i16) -> f64 {
    s as f64 / 32768.0
}

/// Inverse of [`pcm16_to_f64`] on its range, so PCM round trips are exact.
#[inline]
pub fn f64_to_pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
