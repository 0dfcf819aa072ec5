//! Noise and reverberation augmentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AudioUtterance, FrontendError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl ImpulseResponse {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Result<Self, FrontendError> {
        if !taps.iter().any(|&t| t != 0.0) {
            return Err(FrontendError::InvalidConfig(
                "impulse response needs a nonzero tap".into(),
            ));
        }
        Ok(Self { taps, sample_rate })
    }

    pub fn unit(sample_rate: u32) -> Self {
        Self {
            taps: vec![1.0],
            sample_rate,
        }
    }
}

/// Gain applied to `noise` so that the mix has the requested SNR.
pub fn noise_gain(audio: &AudioUtterance, noise: &AudioUtterance, snr_db: f64) -> Result<f64, FrontendError> {
    if audio.sample_rate != noise.sample_rate {
        return Err(FrontendError::SampleRateMismatch(audio.sample_rate, noise.sample_rate));
    }
    let pa = audio.power();
    if pa == 0.0 {
        return Err(FrontendError::UndefinedSnr("audio"));
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    let pn = tiled(&noise.samples, audio.samples.len())
        .map(|s| s * s)
        .sum::<f64>()
        / audio.samples.len() as f64;
    if pn == 0.0 {
        return Err(FrontendError::UndefinedSnr("noise"));
    }
    Ok((pa / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

fn tiled(noise: &[f64], len: usize) -> impl Iterator<Item = f64> + '_ {
    noise.iter().copied().cycle().take(len)
}

/// `audio + g·noise`, noise tiled or truncated to the audio length.
/// `snr_db = f64::INFINITY` leaves the audio untouched.
pub fn augment_noise(
    audio: &AudioUtterance,
    noise: &AudioUtterance,
    snr_db: f64,
) -> Result<AudioUtterance, FrontendError> {
    let g = noise_gain(audio, noise, snr_db)?;
    if g == 0.0 {
        return Ok(audio.clone());
    }
    let samples = audio
        .samples
        .iter()
        .zip(tiled(&noise.samples, audio.samples.len()))
        .map(|(a, n)| a + g * n)
        .collect();
    Ok(AudioUtterance {
        samples,
        sample_rate: audio.sample_rate,
        transcript: audio.transcript.clone(),
    })
}

/// Seeded exponentially decaying Gaussian taps, first tap fixed to 1.
pub fn synth_rir(
    seed: u64,
    duration_ms: f64,
    decay_rate: f64,
    sample_rate: u32,
) -> Result<ImpulseResponse, FrontendError> {
    if !(duration_ms > 0.0) {
        return Err(FrontendError::InvalidConfig("RIR duration must be positive".into()));
    }
    let n = ((duration_ms * sample_rate as f64 / 1000.0).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taps: Vec<f64> = (0..n)
        .map(|k| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let env = (-decay_rate * k as f64).exp();
            if env == 0.0 {
                0.0
            } else {
                env * noise
            }
        })
        .collect();
    taps[0] = 1.0;
    Ok(ImpulseResponse { taps, sample_rate })
}

/// Linear convolution truncated to `signal.len()`, computed with an FFT.
pub fn convolve_truncated(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n == 0 || taps.is_empty() {
        return vec![0.0; n];
    }
    let size = (n + taps.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut b = vec![Complex::new(0.0, 0.0); size];
        for (d, &s) in b.iter_mut().zip(v) {
            d.re = s;
        }
        b
    };
    let mut a = pad(signal);
    let mut b = pad(taps);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a[..n].iter().map(|c| c.re * scale).collect()
}

/// Reverberates `audio` with `rir` and rescales to the input peak amplitude.
pub fn augment_rir(audio: &AudioUtterance, rir: &ImpulseResponse) -> Result<AudioUtterance, FrontendError> {
    if audio.sample_rate != rir.sample_rate {
        return Err(FrontendError::SampleRateMismatch(audio.sample_rate, rir.sample_rate));
    }
    let mut out = convolve_truncated(&audio.samples, &rir.taps);
    let peak_in = audio.peak();
    let peak_out = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak_out > 0.0 {
        let g = peak_in / peak_out;
        out.iter_mut().for_each(|s| *s *= g);
    }
    Ok(AudioUtterance {
        samples: out,
        sample_rate: audio.sample_rate,
        transcript: audio.transcript.clone(),
    })
}
