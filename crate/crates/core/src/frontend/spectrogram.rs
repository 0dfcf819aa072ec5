use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioUtterance, FrontendError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Floor added before the log so silence maps to a finite value.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub n_bins: usize,
    pub hop_ms: f64,
    pub window_ms: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            n_bins: 161,
            hop_ms: 10.0,
            window_ms: 20.0,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        if self.n_bins < 1 {
            return Err(FrontendError::InvalidConfig("n_bins must be >= 1".into()));
        }
        if !(self.hop_ms > 0.0) || self.window_ms < self.hop_ms {
            return Err(FrontendError::InvalidConfig(format!(
                "need 0 < hop_ms <= window_ms, got hop {} window {}",
                self.hop_ms, self.window_ms
            )));
        }
        Ok(())
    }

    /// FFT length implied by the bin count.
    pub fn fft_len(&self) -> usize {
        2 * (self.n_bins.max(2) - 1)
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        ((self.hop_ms * sample_rate as f64 / 1000.0).round() as usize).max(1)
    }

    /// Frames produced from `n` samples (0 when shorter than a window).
    pub fn frame_count(&self, n: usize, sample_rate: u32) -> usize {
        let w = self.window_samples(sample_rate);
        if n < w {
            0
        } else {
            (n - w) / self.hop_samples(sample_rate) + 1
        }
    }

    /// Center frequency of bin `k` in Hz.
    pub fn bin_frequency(&self, k: usize, sample_rate: u32) -> f64 {
        k as f64 * sample_rate as f64 / self.fft_len() as f64
    }
}

/// Time × frequency matrix. `compressed` is set once values are in the log
/// (or otherwise compressed) domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<T> {
    pub values: Matrix<T>,
    pub frame_hop_ms: f64,
    pub compressed: bool,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn new(values: Matrix<T>, frame_hop_ms: f64, compressed: bool) -> Self {
        Self {
            values,
            frame_hop_ms,
            compressed,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }
}

/// Hann-windowed power spectrum of one frame, with a cached FFT plan.
#[derive(Clone)]
pub struct SpectrogramExtractor<T: Scalar> {
    cfg: SpectrogramConfig,
    sample_rate: u32,
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Scalar> std::fmt::Debug for SpectrogramExtractor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectrogramExtractor")
            .field("cfg", &self.cfg)
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl<T: Scalar> SpectrogramExtractor<T> {
    pub fn new(cfg: SpectrogramConfig, sample_rate: u32) -> Result<Self, FrontendError> {
        cfg.validate()?;
        let n_fft = cfg.fft_len();
        let w = cfg.window_samples(sample_rate);
        if w == 0 || w > n_fft {
            return Err(FrontendError::InvalidConfig(format!(
                "window of {w} samples does not fit FFT length {n_fft} ({} bins)",
                cfg.n_bins
            )));
        }
        // periodic Hann
        let window = (0..w)
            .map(|n| T::lit(0.5 - 0.5 * (2.0 * PI * n as f64 / w as f64).cos()))
            .collect();
        let fft = FftPlanner::<T>::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg,
            sample_rate,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn hop_len(&self) -> usize {
        self.cfg.hop_samples(self.sample_rate)
    }

    /// Power (|X|²) for the window starting at `samples[0]`.
    pub fn frame_power(&self, samples: &[f64], out: &mut [T]) {
        let n_fft = self.cfg.fft_len();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        for (i, (b, &w)) in buf.iter_mut().zip(&self.window).enumerate() {
            b.re = T::lit(samples[i]) * w;
        }
        self.fft.process(&mut buf);
        for (k, o) in out.iter_mut().enumerate().take(self.cfg.n_bins) {
            *o = buf[k].norm_sqr();
        }
    }

    pub fn power(&self, samples: &[f64]) -> Result<Matrix<T>, FrontendError> {
        let w = self.window_len();
        if samples.len() < w {
            return Err(FrontendError::TooShort {
                samples: samples.len(),
                window: w,
            });
        }
        let hop = self.hop_len();
        let frames = (samples.len() - w) / hop + 1;
        let mut m = Matrix::zeros(frames, self.cfg.n_bins);
        for t in 0..frames {
            self.frame_power(&samples[t * hop..t * hop + w], m.row_mut(t));
        }
        Ok(m)
    }
}

/// Pre-compression power spectrogram.
pub fn compute_power_spectrogram<T: Scalar>(
    audio: &AudioUtterance,
    cfg: &SpectrogramConfig,
) -> Result<Spectrogram<T>, FrontendError> {
    audio.validate()?;
    let ex = SpectrogramExtractor::<T>::new(*cfg, audio.sample_rate)?;
    Ok(Spectrogram::new(ex.power(&audio.samples)?, cfg.hop_ms, false))
}

/// `ln(power + LOG_FLOOR)` per cell.
pub fn log_compress<T: Scalar>(power: &Spectrogram<T>) -> Spectrogram<T> {
    let floor = T::lit(LOG_FLOOR);
    Spectrogram::new(power.values.map(|p| (p + floor).ln()), power.frame_hop_ms, true)
}

/// Log spectrogram together with the power matrix it was computed from.
pub fn compute_log_spectrogram<T: Scalar>(
    audio: &AudioUtterance,
    cfg: &SpectrogramConfig,
) -> Result<(Spectrogram<T>, Spectrogram<T>), FrontendError> {
    let power = compute_power_spectrogram(audio, cfg)?;
    Ok((log_compress(&power), power))
}
