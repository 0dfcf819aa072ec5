use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::optim::{mix, sgd_nesterov_step, sortagrad_order};
use super::TrainError;
use crate::decoder::{greedy_decode, greedy_decode_grams};
use crate::frontend::{
    augment_noise, augment_rir, compute_power_spectrogram, synth_rir, AudioUtterance, SpectrogramConfig,
};
use crate::harness::{score_corpus, MetricsReport};
use crate::layers::Mode;
use crate::losses::{
    build_gram_lattice, ce_alignment_loss, ctc_loss, gramctc_loss, joint_loss, shift_alignment, viterbi_align,
    Alignment, GramLattice, Head, LossError, LossTerm,
};
use crate::model::Model;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Which loss drives each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossSchedule {
    Ctc,
    /// GramCTC on the gram head only.
    GramCtc,
    /// CE on reference alignments for `ce_epochs`, then CTC.
    Pretrain { ce_epochs: usize },
    /// Weighted CE + CTC (+ GramCTC on the gram head when `gram > 0`).
    Joint { ce: f64, ctc: f64, gram: f64 },
}

impl LossSchedule {
    pub fn needs_alignments(&self) -> bool {
        match *self {
            LossSchedule::Pretrain { ce_epochs } => ce_epochs > 0,
            LossSchedule::Joint { ce, .. } => ce > 0.0,
            _ => false,
        }
    }

    pub fn needs_grams(&self) -> bool {
        match *self {
            LossSchedule::GramCtc => true,
            LossSchedule::Joint { gram, .. } => gram > 0.0,
            _ => false,
        }
    }

    /// Head whose greedy output is scored on holdout.
    pub fn decode_head(&self) -> DecodeHead {
        match self {
            LossSchedule::GramCtc => DecodeHead::Gram,
            _ => DecodeHead::Char,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeHead {
    Char,
    Gram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: LossSchedule,
    /// Fraction of training utterances noise-augmented each epoch.
    pub noise_prob: f64,
    /// Fraction convolved with a synthetic room response each epoch.
    pub rir_prob: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub rir_duration_ms: f64,
    /// Per-sample exponential decay of synthetic room responses.
    pub rir_decay: f64,
    /// Frames to delay reference alignments by (negative advances them).
    pub align_shift: i64,
    /// Fit log-frontend normalization on the training set before epoch 0.
    pub fit_feature_stats: bool,
}

impl TrainConfig {
    /// Small-batch settings for a single-machine run. The tighter clip keeps
    /// lr 5e-4 stable.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 5e-4,
            momentum: 0.99,
            clip_norm: 20.0,
            epochs: 10,
            seed: 0,
            schedule: LossSchedule::Ctc,
            noise_prob: 0.4,
            rir_prob: 0.2,
            snr_db_min: 10.0,
            snr_db_max: 30.0,
            rir_duration_ms: 50.0,
            rir_decay: 0.03,
            align_shift: 0,
            fit_feature_stats: true,
        }
    }

    /// Batch 512, lr 7e-4, momentum 0.99.
    pub fn paper() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 7e-4,
            clip_norm: 400.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise_prob) || !(0.0..=1.0).contains(&self.rir_prob) {
            return bad("augmentation probabilities must lie in [0, 1]");
        }
        if self.snr_db_min > self.snr_db_max {
            return bad("snr_db_min exceeds snr_db_max");
        }
        if let LossSchedule::Joint { ce, ctc, gram } = self.schedule {
            if [ce, ctc, gram].iter().any(|w| !(*w >= 0.0)) || ce + ctc + gram <= 0.0 {
                return bad("joint weights must be non-negative with a positive sum");
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One utterance: power spectrogram plus, when augmentation is wanted, the
/// waveform it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub power: Matrix<T>,
    pub transcript: String,
    pub audio: Option<AudioUtterance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainData<T> {
    pub train: Vec<Example<T>>,
    pub holdout: Vec<Example<T>>,
    pub spectrogram: SpectrogramConfig,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_audio(
        train: &[AudioUtterance],
        holdout: &[AudioUtterance],
        spectrogram: SpectrogramConfig,
    ) -> Result<Self, TrainError> {
        let conv = |us: &[AudioUtterance]| -> Result<Vec<Example<T>>, TrainError> {
            us.iter()
                .map(|u| {
                    Ok(Example {
                        power: compute_power_spectrogram::<T>(u, &spectrogram)?.values,
                        transcript: u.transcript.clone().unwrap_or_default(),
                        audio: Some(u.clone()),
                    })
                })
                .collect()
        };
        Ok(Self {
            train: conv(train)?,
            holdout: conv(holdout)?,
            spectrogram,
        })
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    /// Mean scheduled loss per utterance.
    pub loss: f64,
    /// Mean CTC loss of the character head on the same forward passes.
    pub ctc: Option<f64>,
    pub cer: Option<f64>,
    pub wer: Option<f64>,
    pub seconds: f64,
    /// Utterances without a valid path for their label.
    pub skipped: usize,
}

/// Append-only training history with the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    records: Vec<RunRecord>,
}

impl RunLog {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: RunRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    /// One JSON object per epoch.
    pub fn to_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable record") + "\n")
            .collect()
    }
}

/// Greedy transcript of one utterance from the chosen head.
pub fn decode_utterance<T: Scalar>(model: &Model<T>, power: &Matrix<T>, head: DecodeHead) -> Result<String, TrainError> {
    let out = model.infer(power)?;
    Ok(match (head, &out.gram_log_probs, &model.spec.grams) {
        (DecodeHead::Gram, Some(lp), Some(g)) => greedy_decode_grams(lp, g),
        (DecodeHead::Gram, _, _) => return Err(TrainError::Config("model has no gram head".into())),
        (DecodeHead::Char, _, _) => greedy_decode(&out.char_log_probs, &model.spec.alphabet),
    })
}

/// Corpus CER/WER of greedy transcripts.
pub fn evaluate<T: Scalar>(model: &Model<T>, examples: &[Example<T>], head: DecodeHead) -> Result<MetricsReport, TrainError> {
    let hyps: Vec<String> = examples
        .iter()
        .map(|e| decode_utterance(model, &e.power, head))
        .collect::<Result<_, _>>()?;
    score_corpus(examples.iter().zip(&hyps).map(|(e, h)| (e.transcript.as_str(), h.as_str(), None)))
        .map_err(|e| TrainError::Config(e.to_string()))
}

/// Viterbi alignments of `reference` on each training label, shifted by
/// `shift` frames.
pub fn reference_alignments<T: Scalar>(
    reference: &Model<T>,
    examples: &[Example<T>],
    shift: i64,
) -> Result<Vec<Alignment>, TrainError> {
    examples
        .iter()
        .map(|e| {
            let lp = reference.infer(&e.power)?.char_log_probs;
            let label = reference
                .spec
                .alphabet
                .encode(&e.transcript)
                .map_err(|err| TrainError::Config(err.to_string()))?;
            let a = viterbi_align(&lp, &label)?;
            Ok(if shift == 0 { a } else { shift_alignment(&a, shift as isize) })
        })
        .collect()
}

fn augmented<T: Scalar>(
    ex: &Example<T>,
    cfg: &TrainConfig,
    spec: &SpectrogramConfig,
    epoch: usize,
    idx: usize,
) -> Result<Option<Matrix<T>>, TrainError> {
    let Some(audio) = &ex.audio else { return Ok(None) };
    if cfg.noise_prob == 0.0 && cfg.rir_prob == 0.0 {
        return Ok(None);
    }
    // Counter-based stream: independent of batch order.
    let mut r = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, epoch as u64), idx as u64));
    let (do_noise, do_rir) = (r.random_bool(cfg.noise_prob), r.random_bool(cfg.rir_prob));
    if !do_noise && !do_rir {
        return Ok(None);
    }
    let mut a = audio.clone();
    if do_rir {
        let rir = synth_rir(r.random(), cfg.rir_duration_ms, cfg.rir_decay, a.sample_rate)?;
        a = augment_rir(&a, &rir)?;
    }
    if do_noise {
        let noise: Vec<f64> = (0..a.samples.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        let snr = r.random_range(cfg.snr_db_min..=cfg.snr_db_max);
        let n = AudioUtterance {
            samples: noise,
            sample_rate: a.sample_rate,
            transcript: None,
        };
        // Silent audio has no defined SNR; keep it clean.
        if let Ok(mixed) = augment_noise(&a, &n, snr) {
            a = mixed;
        }
    }
    Ok(Some(compute_power_spectrogram::<T>(&a, spec)?.values))
}

struct Targets {
    labels: Vec<Vec<usize>>,
    lattices: Option<Vec<GramLattice>>,
    alignments: Option<Vec<Alignment>>,
}

fn full_rank_or_skip<T>(r: Result<T, LossError>) -> Result<Option<T>, TrainError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(LossError::LabelTooLong { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Runs `cfg.epochs` epochs. CE-based schedules need `reference` to supply
/// Viterbi alignments. Deterministic given the inputs.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    mut model: Model<T>,
    data: &TrainData<T>,
    reference: Option<&Model<T>>,
) -> Result<(Model<T>, RunLog), TrainError> {
    cfg.validate()?;
    let mut log = RunLog::new(cfg.clone());
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    if data.train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let alphabet = model.spec.alphabet.clone();
    let labels = data
        .train
        .iter()
        .map(|e| alphabet.encode(&e.transcript))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| TrainError::Config(format!("training transcript: {e}")))?;
    let lattices = if cfg.schedule.needs_grams() {
        let g = model
            .spec
            .grams
            .clone()
            .ok_or_else(|| TrainError::Config("schedule needs a gram head".into()))?;
        Some(
            data.train
                .iter()
                .map(|e| build_gram_lattice(&e.transcript, &g))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    let alignments = if cfg.schedule.needs_alignments() {
        let r = reference.ok_or_else(|| TrainError::Config("CE schedule requires a reference checkpoint".into()))?;
        let a = reference_alignments(r, &data.train, cfg.align_shift)?;
        for (al, e) in a.iter().zip(&data.train) {
            let t = model.output_frames(e.power.rows());
            if al.len() != t {
                return Err(LossError::AlignmentMismatch {
                    got: al.len(),
                    expected: t,
                }
                .into());
            }
        }
        Some(a)
    } else {
        None
    };
    let targets = Targets {
        labels,
        lattices,
        alignments,
    };
    if cfg.fit_feature_stats {
        model.fit_feature_stats(data.train.iter().map(|e| &e.power));
    }
    let durations: Vec<f64> = data.train.iter().map(|e| e.power.rows() as f64).collect();
    let mut velocity = vec![T::zero(); model.param_count()];
    let head = cfg.schedule.decode_head();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut ctc_sum, mut n_ok, mut n_ctc, mut skipped) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for batch in sortagrad_order(&durations, epoch, cfg.batch_size, cfg.seed) {
            let powers: Vec<Matrix<T>> = batch
                .iter()
                .map(|&i| {
                    Ok(augmented(&data.train[i], cfg, &data.spectrogram, epoch, i)?
                        .unwrap_or_else(|| data.train[i].power.clone()))
                })
                .collect::<Result<_, TrainError>>()?;
            let out = model.forward(&powers, Mode::Train)?;
            let inv = T::one() / T::from_count(batch.len());
            let mut d_char: Vec<Matrix<T>> = out.char_log_probs.iter().map(Matrix::zeros_like).collect();
            let mut d_gram: Option<Vec<Matrix<T>>> =
                out.gram_log_probs.as_ref().map(|g| g.iter().map(Matrix::zeros_like).collect());
            for (b, &i) in batch.iter().enumerate() {
                let lp = &out.char_log_probs[b];
                let ctc = full_rank_or_skip(ctc_loss(lp, &targets.labels[i]))?;
                if let Some((l, _)) = &ctc {
                    ctc_sum += l.as_f64();
                    n_ctc += 1;
                }
                let mut terms: Vec<LossTerm<T>> = Vec::new();
                let ce_term = |w: f64| -> Result<LossTerm<T>, TrainError> {
                    let a = &targets.alignments.as_ref().expect("alignments prepared")[i];
                    // Per-utterance sum, on the same footing as the CTC NLL.
                    let (mean, mut grad) = ce_alignment_loss(lp, a)?;
                    let frames = T::from_count(a.len());
                    grad.scale(frames);
                    let loss = mean * frames;
                    Ok(LossTerm {
                        head: Head::Char,
                        weight: w,
                        loss,
                        grad,
                    })
                };
                let gram_term = |w: f64| -> Result<Option<LossTerm<T>>, TrainError> {
                    let glp = &out.gram_log_probs.as_ref().expect("gram head present")[b];
                    let lat = &targets.lattices.as_ref().expect("lattices prepared")[i];
                    Ok(full_rank_or_skip(gramctc_loss(glp, lat))?.map(|(loss, grad)| LossTerm {
                        head: Head::Gram,
                        weight: w,
                        loss,
                        grad,
                    }))
                };
                let ctc_term = |w: f64| {
                    ctc.clone().map(|(loss, grad)| LossTerm {
                        head: Head::Char,
                        weight: w,
                        loss,
                        grad,
                    })
                };
                let complete = match cfg.schedule {
                    LossSchedule::Ctc => ctc_term(1.0).map(|t| terms.push(t)).is_some(),
                    LossSchedule::GramCtc => gram_term(1.0)?.map(|t| terms.push(t)).is_some(),
                    LossSchedule::Pretrain { ce_epochs } if epoch < ce_epochs => {
                        terms.push(ce_term(1.0)?);
                        true
                    }
                    LossSchedule::Pretrain { .. } => ctc_term(1.0).map(|t| terms.push(t)).is_some(),
                    LossSchedule::Joint { ce, ctc: w_ctc, gram } => {
                        let mut ok = true;
                        if ce > 0.0 {
                            terms.push(ce_term(ce)?);
                        }
                        if w_ctc > 0.0 {
                            ok &= ctc_term(w_ctc).map(|t| terms.push(t)).is_some();
                        }
                        if gram > 0.0 {
                            ok &= gram_term(gram)?.map(|t| terms.push(t)).is_some();
                        }
                        ok
                    }
                };
                if !complete || terms.is_empty() {
                    skipped += 1;
                    continue;
                }
                let j = joint_loss(&terms)?;
                loss_sum += j.loss.as_f64();
                n_ok += 1;
                if let Some(mut g) = j.char_grad {
                    g.scale(inv);
                    d_char[b] = g;
                }
                if let (Some(mut g), Some(dg)) = (j.gram_grad, d_gram.as_mut()) {
                    g.scale(inv);
                    dg[b] = g;
                }
            }
            let grads = model.backward(&out.cache, &d_char, d_gram.as_deref())?;
            let mut flat = model.params.to_flat();
            sgd_nesterov_step(
                &mut flat,
                &mut velocity,
                &grads.to_flat(),
                cfg.learning_rate,
                cfg.momentum,
                cfg.clip_norm,
            )?;
            model.params.set_flat(&flat);
            model.update_running_stats(&out.cache);
        }
        let (cer, wer) = if data.holdout.is_empty() {
            (None, None)
        } else {
            let m = evaluate(&model, &data.holdout, head)?;
            (Some(m.cer), Some(m.wer))
        };
        log.push(RunRecord {
            epoch,
            loss: if n_ok > 0 { loss_sum / n_ok as f64 } else { f64::NAN },
            ctc: (n_ctc > 0).then(|| ctc_sum / n_ctc as f64),
            cer,
            wer,
            seconds: start.elapsed().as_secs_f64(),
            skipped,
        });
    }
    Ok((model, log))
}
