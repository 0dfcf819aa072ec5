use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::alphabet::Alphabet;
use super::synth_spectrogram_config;
use crate::decoder::{BeamConfig, DEFAULT_LM_K, DEFAULT_LM_ORDER};
use crate::frontend::SpectrogramConfig;
use crate::losses::GramSet;
use crate::model::{ModelSpec, Preset, Scale, DESK_WIDTH};
use crate::trainer::{LossSchedule, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
}

/// Every recognized key, in `to_text` order.
pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "scale",
    "width",
    "stride4",
    "alphabet",
    "gram_max_len",
    "gram_count",
    "precision",
    "n_bins",
    "hop_ms",
    "window_ms",
    "batch_size",
    "learning_rate",
    "momentum",
    "clip_norm",
    "epochs",
    "seed",
    "schedule",
    "ce_epochs",
    "weight_ce",
    "weight_ctc",
    "weight_gram",
    "noise_prob",
    "rir_prob",
    "snr_db_min",
    "snr_db_max",
    "rir_duration_ms",
    "rir_decay",
    "align_shift",
    "fit_feature_stats",
    "train_manifest",
    "holdout_manifest",
    "reference_checkpoint",
    "output_dir",
    "beam_width",
    "lm_alpha",
    "lm_beta",
    "lm_path",
    "lm_order",
    "lm_k",
    "streams",
    "packet_ms",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// A full experiment, parsed from `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub scale: Scale,
    pub width: usize,
    pub stride4: bool,
    pub alphabet: Alphabet,
    /// 0 disables the gram head.
    pub gram_max_len: usize,
    pub gram_count: usize,
    pub precision: Precision,
    pub spectrogram: SpectrogramConfig,
    pub train: TrainConfig,
    pub train_manifest: Option<PathBuf>,
    pub holdout_manifest: Option<PathBuf>,
    pub reference_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub beam: BeamConfig,
    pub lm_path: Option<PathBuf>,
    pub lm_order: usize,
    pub lm_k: f64,
    pub streams: usize,
    pub packet_ms: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Proposed,
            scale: Scale::Desk,
            width: DESK_WIDTH,
            stride4: false,
            alphabet: "abcdefghijklmnopqrstuvwxyz '".parse().expect("valid alphabet"),
            gram_max_len: 0,
            gram_count: 0,
            precision: Precision::F32,
            spectrogram: synth_spectrogram_config(),
            train: TrainConfig::desk(),
            train_manifest: None,
            holdout_manifest: None,
            reference_checkpoint: None,
            output_dir: PathBuf::from("runs"),
            beam: BeamConfig::default(),
            lm_path: None,
            lm_order: DEFAULT_LM_ORDER,
            lm_k: DEFAULT_LM_K,
            streams: 4,
            packet_ms: 100.0,
        }
    }
}

fn unquote(v: &str) -> String {
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        serde_json::from_str(v).unwrap_or_else(|_| v[1..v.len() - 1].to_string())
    } else {
        v.to_string()
    }
}

fn path_opt(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Applies one assignment. Unknown keys are errors, never ignored.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let value = unquote(raw.trim());
        let v = value.as_str();
        let invalid = |reason: String| ConfigError::InvalidValue {
            key: key.to_string(),
            value: v.to_string(),
            reason,
        };
        fn num<N: std::str::FromStr>(v: &str) -> Result<N, String>
        where
            N::Err: std::fmt::Display,
        {
            v.parse::<N>().map_err(|e| e.to_string())
        }
        let t = &mut self.train;
        let joint = |s: &LossSchedule| match *s {
            LossSchedule::Joint { ce, ctc, gram } => (ce, ctc, gram),
            _ => (0.0, 1.0, 0.0),
        };
        match key {
            "preset" => self.preset = v.parse().map_err(|e: crate::model::ModelError| invalid(e.to_string()))?,
            "scale" => {
                self.scale = match v {
                    "paper" => Scale::Paper,
                    "desk" => Scale::Desk,
                    _ => return Err(invalid("expected paper or desk".into())),
                }
            }
            "width" => self.width = num(v).map_err(invalid)?,
            "stride4" => self.stride4 = num(v).map_err(invalid)?,
            "alphabet" => self.alphabet = v.parse().map_err(|e: crate::alphabet::AlphabetError| invalid(e.to_string()))?,
            "gram_max_len" => self.gram_max_len = num(v).map_err(invalid)?,
            "gram_count" => self.gram_count = num(v).map_err(invalid)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(invalid("expected f32 or f64".into())),
                }
            }
            "n_bins" => self.spectrogram.n_bins = num(v).map_err(invalid)?,
            "hop_ms" => self.spectrogram.hop_ms = num(v).map_err(invalid)?,
            "window_ms" => self.spectrogram.window_ms = num(v).map_err(invalid)?,
            "batch_size" => t.batch_size = num(v).map_err(invalid)?,
            "learning_rate" => t.learning_rate = num(v).map_err(invalid)?,
            "momentum" => t.momentum = num(v).map_err(invalid)?,
            "clip_norm" => t.clip_norm = num(v).map_err(invalid)?,
            "epochs" => t.epochs = num(v).map_err(invalid)?,
            "seed" => t.seed = num(v).map_err(invalid)?,
            "schedule" => {
                t.schedule = match v {
                    "ctc" => LossSchedule::Ctc,
                    "gramctc" => LossSchedule::GramCtc,
                    "pretrain" => LossSchedule::Pretrain {
                        ce_epochs: match t.schedule {
                            LossSchedule::Pretrain { ce_epochs } => ce_epochs,
                            _ => 1,
                        },
                    },
                    "joint" => {
                        let (ce, ctc, gram) = match t.schedule {
                            LossSchedule::Joint { .. } => joint(&t.schedule),
                            _ => (0.5, 0.5, 0.0),
                        };
                        LossSchedule::Joint { ce, ctc, gram }
                    }
                    _ => return Err(invalid("expected ctc, gramctc, pretrain or joint".into())),
                }
            }
            "ce_epochs" => {
                let ce_epochs = num(v).map_err(invalid)?;
                if let LossSchedule::Pretrain { .. } = t.schedule {
                    t.schedule = LossSchedule::Pretrain { ce_epochs };
                } else {
                    return Err(invalid("ce_epochs requires schedule = pretrain".into()));
                }
            }
            "weight_ce" | "weight_ctc" | "weight_gram" => {
                let w: f64 = num(v).map_err(invalid)?;
                let LossSchedule::Joint { mut ce, mut ctc, mut gram } = t.schedule else {
                    return Err(invalid("joint weights require schedule = joint".into()));
                };
                match key {
                    "weight_ce" => ce = w,
                    "weight_ctc" => ctc = w,
                    _ => gram = w,
                }
                t.schedule = LossSchedule::Joint { ce, ctc, gram };
            }
            "noise_prob" => t.noise_prob = num(v).map_err(invalid)?,
            "rir_prob" => t.rir_prob = num(v).map_err(invalid)?,
            "snr_db_min" => t.snr_db_min = num(v).map_err(invalid)?,
            "snr_db_max" => t.snr_db_max = num(v).map_err(invalid)?,
            "rir_duration_ms" => t.rir_duration_ms = num(v).map_err(invalid)?,
            "rir_decay" => t.rir_decay = num(v).map_err(invalid)?,
            "align_shift" => t.align_shift = num(v).map_err(invalid)?,
            "fit_feature_stats" => t.fit_feature_stats = num(v).map_err(invalid)?,
            "train_manifest" => self.train_manifest = path_opt(v),
            "holdout_manifest" => self.holdout_manifest = path_opt(v),
            "reference_checkpoint" => self.reference_checkpoint = path_opt(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "beam_width" => self.beam.beam_width = num(v).map_err(invalid)?,
            "lm_alpha" => self.beam.alpha = num(v).map_err(invalid)?,
            "lm_beta" => self.beam.beta = num(v).map_err(invalid)?,
            "lm_path" => self.lm_path = path_opt(v),
            "lm_order" => self.lm_order = num(v).map_err(invalid)?,
            "lm_k" => self.lm_k = num(v).map_err(invalid)?,
            "streams" => self.streams = num(v).map_err(invalid)?,
            "packet_ms" => self.packet_ms = num(v).map_err(invalid)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k.trim(), v)
    }

    /// Current value of `key`, formatted so that `set` reproduces it.
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        let t = &self.train;
        let (ce, ctc, gram) = match t.schedule {
            LossSchedule::Joint { ce, ctc, gram } => (Some(ce), Some(ctc), Some(gram)),
            _ => (None, None, None),
        };
        let opt = |o: Option<f64>| o.map(|x| x.to_string()).unwrap_or_default();
        Ok(match key {
            "preset" => match self.preset {
                Preset::Baseline => "baseline",
                Preset::Proposed => "proposed",
                Preset::Bidirectional => "bidirectional",
            }
            .into(),
            "scale" => match self.scale {
                Scale::Paper => "paper",
                Scale::Desk => "desk",
            }
            .into(),
            "width" => self.width.to_string(),
            "stride4" => self.stride4.to_string(),
            "alphabet" => serde_json::to_string(&self.alphabet.chars().iter().collect::<String>()).expect("string"),
            "gram_max_len" => self.gram_max_len.to_string(),
            "gram_count" => self.gram_count.to_string(),
            "precision" => match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
            "n_bins" => self.spectrogram.n_bins.to_string(),
            "hop_ms" => self.spectrogram.hop_ms.to_string(),
            "window_ms" => self.spectrogram.window_ms.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "momentum" => t.momentum.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "epochs" => t.epochs.to_string(),
            "seed" => t.seed.to_string(),
            "schedule" => match t.schedule {
                LossSchedule::Ctc => "ctc",
                LossSchedule::GramCtc => "gramctc",
                LossSchedule::Pretrain { .. } => "pretrain",
                LossSchedule::Joint { .. } => "joint",
            }
            .into(),
            "ce_epochs" => match t.schedule {
                LossSchedule::Pretrain { ce_epochs } => ce_epochs.to_string(),
                _ => String::new(),
            },
            "weight_ce" => opt(ce),
            "weight_ctc" => opt(ctc),
            "weight_gram" => opt(gram),
            "noise_prob" => t.noise_prob.to_string(),
            "rir_prob" => t.rir_prob.to_string(),
            "snr_db_min" => t.snr_db_min.to_string(),
            "snr_db_max" => t.snr_db_max.to_string(),
            "rir_duration_ms" => t.rir_duration_ms.to_string(),
            "rir_decay" => t.rir_decay.to_string(),
            "align_shift" => t.align_shift.to_string(),
            "fit_feature_stats" => t.fit_feature_stats.to_string(),
            "train_manifest" => show_path(&self.train_manifest),
            "holdout_manifest" => show_path(&self.holdout_manifest),
            "reference_checkpoint" => show_path(&self.reference_checkpoint),
            "output_dir" => self.output_dir.display().to_string(),
            "beam_width" => self.beam.beam_width.to_string(),
            "lm_alpha" => self.beam.alpha.to_string(),
            "lm_beta" => self.beam.beta.to_string(),
            "lm_path" => show_path(&self.lm_path),
            "lm_order" => self.lm_order.to_string(),
            "lm_k" => self.lm_k.to_string(),
            "streams" => self.streams.to_string(),
            "packet_ms" => self.packet_ms.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        })
    }

    /// Canonical snapshot; keys that do not apply to the schedule are omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let v = self.get(k).expect("listed key");
            let empty_ok = matches!(*k, "train_manifest" | "holdout_manifest" | "reference_checkpoint" | "lm_path");
            if v.is_empty() && !empty_ok {
                continue;
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Model spec; the gram head is built from `texts` when `gram_max_len > 0`.
    pub fn model_spec<S: AsRef<str>>(&self, texts: &[S]) -> ModelSpec {
        let mut spec = ModelSpec::preset(
            self.preset,
            self.scale,
            self.width,
            self.spectrogram.n_bins,
            self.alphabet.clone(),
        );
        if self.stride4 {
            spec = spec.with_stride4();
        }
        if self.gram_max_len > 0 {
            let size = if self.gram_count == 0 { usize::MAX } else { self.gram_count };
            spec = spec.with_grams(GramSet::from_corpus(self.alphabet.clone(), texts, self.gram_max_len, size));
        }
        spec
    }
}

/// Parses `key = value` lines onto the defaults. `#` starts a comment
/// unless inside a double-quoted value.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let c = parse_config(
            "# run\npreset = baseline\nalphabet = \"ab c\"\nschedule = joint\nweight_ce = 0.25 # tail\nepochs=3\n",
        )
        .unwrap();
        assert_eq!(c.preset, Preset::Baseline);
        assert_eq!(c.alphabet.chars().iter().collect::<String>(), "ab c");
        assert_eq!(
            c.train.schedule,
            LossSchedule::Joint {
                ce: 0.25,
                ctc: 0.5,
                gram: 0.0
            }
        );
        assert_eq!(parse_config(&c.to_text()).unwrap(), c);
        assert_eq!(parse_config(&ExperimentConfig::default().to_text()).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(
            parse_config("epochs = 1\nlearnig_rate = 0.1\n"),
            Err(ConfigError::UnknownKey("learnig_rate".into()))
        );
        assert_eq!(parse_config("epochs 1\n"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(parse_config("epochs = x"), Err(ConfigError::InvalidValue { .. })));
    }

    #[test]
    fn every_listed_key_is_readable() {
        let c = ExperimentConfig::default();
        for k in CONFIG_KEYS {
            assert!(c.get(k).is_ok(), "{k}");
        }
        let mut c = c;
        c.apply_override("pipeline=3").unwrap_err();
        c.apply_override("schedule=pretrain").unwrap();
        c.apply_override("ce_epochs=4").unwrap();
        assert_eq!(c.train.schedule, LossSchedule::Pretrain { ce_epochs: 4 });
    }
}
