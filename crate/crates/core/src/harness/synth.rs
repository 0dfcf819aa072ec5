use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::alphabet::Alphabet;
use crate::frontend::{AudioUtterance, SpectrogramConfig};

/// Synthetic audio runs at a low rate so a 20 ms window yields 41 bins.
pub const SYNTH_SAMPLE_RATE: u32 = 4000;
pub const SYNTH_BINS: usize = 41;

/// Spectrogram settings matching the synthetic sample rate.
pub fn synth_spectrogram_config() -> SpectrogramConfig {
    SpectrogramConfig {
        n_bins: SYNTH_BINS,
        hop_ms: 10.0,
        window_ms: 20.0,
    }
}

/// Signature layout is independent of the dataset seed.
const SIGNATURE_SEED: u64 = 0x5157_4E41;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub holdout: usize,
    /// Characters; a space, if present, separates words and renders as a gap.
    pub alphabet: Alphabet,
    pub vocabulary_size: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Utterance transcript length bounds in characters (spaces included).
    pub min_label_len: usize,
    pub max_label_len: usize,
    /// Frames per character, split evenly between its two phases.
    pub min_char_frames: usize,
    pub max_char_frames: usize,
    pub min_gain: f64,
    pub max_gain: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 500,
            holdout: 50,
            alphabet: "abcdefgh ".parse().expect("valid alphabet"),
            vocabulary_size: 12,
            min_word_len: 2,
            max_word_len: 4,
            min_label_len: 6,
            max_label_len: 14,
            min_char_frames: 6,
            max_char_frames: 10,
            min_gain: 0.2,
            max_gain: 1.0,
            noise_std: 0.003,
        }
    }
}

/// Tone bins of one character: an onset phase shared by pairs of
/// characters, then a phase unique to the character. Identity is only
/// resolved by the second phase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub onset: Vec<usize>,
    pub body: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub vocabulary: Vec<String>,
    pub train: Vec<AudioUtterance>,
    pub holdout: Vec<AudioUtterance>,
}

impl SyntheticDataset {
    pub fn transcripts(&self) -> Vec<&str> {
        self.train.iter().filter_map(|u| u.transcript.as_deref()).collect()
    }
}

fn letters(alphabet: &Alphabet) -> Vec<char> {
    alphabet.chars().iter().copied().filter(|&c| c != ' ').collect()
}

/// Signatures for the non-space characters, in alphabet order.
pub fn signatures(alphabet: &Alphabet) -> Vec<(char, Signature)> {
    let mut r = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
    let chars = letters(alphabet);
    // Usable bins avoid DC and Nyquist; onsets and bodies use disjoint pools.
    let mut pool: Vec<usize> = (3..SYNTH_BINS - 2).collect();
    let mut take = |n: usize, r: &mut ChaCha8Rng| -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if pool.is_empty() {
                pool = (3..SYNTH_BINS - 2).collect();
            }
            let i = r.random_range(0..pool.len());
            out.push(pool.swap_remove(i));
        }
        out.sort_unstable();
        out
    };
    let groups = chars.len().div_ceil(2);
    let onsets: Vec<Vec<usize>> = (0..groups).map(|_| take(2, &mut r)).collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let n = 2 + (i % 2);
            (
                c,
                Signature {
                    onset: onsets[i / 2].clone(),
                    body: take(n, &mut r),
                },
            )
        })
        .collect()
}

fn validate(cfg: &SynthConfig) -> Result<(), HarnessError> {
    let n = letters(&cfg.alphabet).len();
    let bad = |m: &str| Err(HarnessError::InvalidSynth(m.to_string()));
    if cfg.alphabet.len() < 2 || n < 1 {
        return bad("alphabet needs at least two symbols");
    }
    if cfg.min_word_len < 1 || cfg.min_word_len > cfg.max_word_len {
        return bad("need 1 <= min_word_len <= max_word_len");
    }
    if cfg.min_label_len < cfg.min_word_len || cfg.min_label_len > cfg.max_label_len {
        return bad("need min_word_len <= min_label_len <= max_label_len");
    }
    if cfg.max_label_len < cfg.max_word_len {
        return bad("max_label_len must fit the longest word");
    }
    if cfg.min_char_frames < 2 || cfg.min_char_frames > cfg.max_char_frames {
        return bad("need 2 <= min_char_frames <= max_char_frames");
    }
    if cfg.vocabulary_size < 1 {
        return bad("vocabulary_size must be positive");
    }
    if !(cfg.min_gain > 0.0 && cfg.min_gain <= cfg.max_gain && cfg.noise_std >= 0.0) {
        return bad("need 0 < min_gain <= max_gain and noise_std >= 0");
    }
    Ok(())
}

fn vocabulary(cfg: &SynthConfig, r: &mut ChaCha8Rng) -> Vec<String> {
    let chars = letters(&cfg.alphabet);
    let mut words: Vec<String> = Vec::new();
    let mut attempts = 0;
    while words.len() < cfg.vocabulary_size && attempts < 100 * cfg.vocabulary_size {
        attempts += 1;
        let len = r.random_range(cfg.min_word_len..=cfg.max_word_len);
        let w: String = (0..len).map(|_| *chars.choose(r).expect("non-empty")).collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

fn transcript(cfg: &SynthConfig, vocab: &[String], r: &mut ChaCha8Rng) -> String {
    let spaced = cfg.alphabet.index_of(' ').is_some();
    let target = r.random_range(cfg.min_label_len..=cfg.max_label_len);
    let mut s = String::new();
    loop {
        let w = vocab.choose(r).expect("non-empty vocabulary");
        let sep = usize::from(spaced && !s.is_empty());
        let len = s.chars().count();
        if !s.is_empty() && len + sep + w.chars().count() > cfg.max_label_len {
            break;
        }
        if sep == 1 {
            s.push(' ');
        }
        s.push_str(w);
        if s.chars().count() >= target {
            break;
        }
    }
    s
}

fn render(
    cfg: &SynthConfig,
    sigs: &[(char, Signature)],
    text: &str,
    r: &mut ChaCha8Rng,
) -> AudioUtterance {
    let spec = synth_spectrogram_config();
    let hop = spec.hop_samples(SYNTH_SAMPLE_RATE);
    let bin_hz = |k: usize| spec.bin_frequency(k, SYNTH_SAMPLE_RATE);
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid std");
    let mut samples: Vec<f64> = Vec::new();
    let silence = |n: usize, s: &mut Vec<f64>| s.extend(std::iter::repeat_n(0.0, n));
    let tones = |bins: &[usize], n: usize, s: &mut Vec<f64>, r: &mut ChaCha8Rng| {
        let phases: Vec<f64> = bins.iter().map(|_| r.random_range(0.0..2.0 * PI)).collect();
        let amp = 0.8 / bins.len() as f64;
        let start = s.len();
        for i in 0..n {
            let t = (start + i) as f64 / SYNTH_SAMPLE_RATE as f64;
            // Short raised-cosine edges limit splatter between segments.
            let edge = (hop / 4).max(1);
            let env = if i < edge {
                0.5 - 0.5 * (PI * i as f64 / edge as f64).cos()
            } else if n - i <= edge {
                0.5 - 0.5 * (PI * (n - i) as f64 / edge as f64).cos()
            } else {
                1.0
            };
            let v: f64 = bins.iter().zip(&phases).map(|(&k, &p)| (2.0 * PI * bin_hz(k) * t + p).sin()).sum();
            s.push(amp * env * v);
        }
    };
    silence(r.random_range(2..5) * hop, &mut samples);
    for c in text.chars() {
        let frames = r.random_range(cfg.min_char_frames..=cfg.max_char_frames);
        if c == ' ' {
            silence(frames * hop, &mut samples);
            continue;
        }
        let sig = &sigs.iter().find(|(x, _)| *x == c).expect("signature for every letter").1;
        let first = frames / 2;
        tones(&sig.onset, first * hop, &mut samples, r);
        tones(&sig.body, (frames - first) * hop, &mut samples, r);
    }
    // Trailing silence also completes the last analysis window.
    silence(r.random_range(3..6) * hop, &mut samples);
    let gain = r.random_range(cfg.min_gain..=cfg.max_gain);
    for s in samples.iter_mut() {
        *s = (*s * gain + noise.sample(r)).clamp(-1.0, 1.0);
    }
    AudioUtterance {
        samples,
        sample_rate: SYNTH_SAMPLE_RATE,
        transcript: Some(text.to_string()),
    }
}

/// Deterministic given `cfg` (including its seed).
pub fn gen_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset, HarnessError> {
    validate(cfg)?;
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = vocabulary(cfg, &mut r);
    let sigs = signatures(&cfg.alphabet);
    let mut make = |n: usize| -> Vec<AudioUtterance> {
        (0..n)
            .map(|_| {
                let t = transcript(cfg, &vocab, &mut r);
                render(cfg, &sigs, &t, &mut r)
            })
            .collect()
    };
    let train = make(cfg.train);
    let holdout = make(cfg.holdout);
    Ok(SyntheticDataset {
        config: cfg.clone(),
        vocabulary: vocab,
        train,
        holdout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::compute_power_spectrogram;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            train: 6,
            holdout: 2,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(gen_synthetic_dataset(&small(3)).unwrap(), gen_synthetic_dataset(&small(3)).unwrap());
        assert_ne!(gen_synthetic_dataset(&small(3)).unwrap(), gen_synthetic_dataset(&small(4)).unwrap());
    }

    #[test]
    fn single_character_alphabet_is_rejected() {
        let cfg = SynthConfig {
            alphabet: "a".parse().unwrap(),
            ..small(0)
        };
        assert!(matches!(gen_synthetic_dataset(&cfg), Err(HarnessError::InvalidSynth(_))));
    }

    #[test]
    fn transcripts_respect_bounds_and_vocabulary() {
        let d = gen_synthetic_dataset(&SynthConfig { train: 100, ..small(5) }).unwrap();
        for t in d.transcripts() {
            let n = t.chars().count();
            assert!(n <= d.config.max_label_len, "{t:?}");
            assert!(t.split(' ').all(|w| d.vocabulary.iter().any(|v| v == w)), "{t:?}");
            assert!(d.config.alphabet.contains_str(t));
        }
    }

    #[test]
    fn signature_bins_dominate_their_frames() {
        let sigs = signatures(&SynthConfig::default().alphabet);
        // Every body differs; onsets are shared by pairs.
        for (i, (_, a)) in sigs.iter().enumerate() {
            for (j, (_, b)) in sigs.iter().enumerate() {
                if i != j {
                    assert_ne!(a.body, b.body);
                }
            }
            assert_eq!(a.onset, sigs[i ^ 1].1.onset);
        }
        let cfg = SynthConfig {
            noise_std: 0.0,
            min_char_frames: 10,
            max_char_frames: 10,
            ..small(0)
        };
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let u = render(&cfg, &sigs, "a", &mut r);
        let p = compute_power_spectrogram::<f64>(&u, &synth_spectrogram_config()).unwrap().values;
        let lead = (0..p.rows()).find(|&t| p.row(t).iter().sum::<f64>() > 1e-3).unwrap();
        let t_body = lead + 7;
        let top = (0..SYNTH_BINS).max_by(|&a, &b| p[(t_body, a)].total_cmp(&p[(t_body, b)])).unwrap();
        assert!(sigs[0].1.body.contains(&top), "{top} not in {:?}", sigs[0].1.body);
    }
}
