use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use deskasr::decoder::{beam_search_decode, train_char_lm, CharLm};
use deskasr::frontend::{compute_power_spectrogram, AudioUtterance, SpectrogramConfig};
use deskasr::harness::{
    gen_synthetic_dataset, load_manifest, read_wav, score_corpus, write_wav, DatasetManifest, ExperimentConfig, Split,
    SynthConfig, SYNTH_SAMPLE_RATE,
};
use deskasr::losses::{alignment_xcorr, viterbi_align, Alignment};
use deskasr::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use deskasr::scalar::Scalar;
use deskasr::streaming::{BenchConfig, Clock, Server, Transport};
use deskasr::trainer::{decode_utterance, grad_check, grad_check_all, DecodeHead, TrainData, COMPONENTS};

/// Some gradient checks exceeded the tolerance.
#[derive(Debug)]
pub struct ChecksFailed(pub usize);

impl fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} gradient check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

const META_SPECTROGRAM: &str = "spectrogram";
const META_SAMPLE_RATE: &str = "sample_rate";

/// Frontend settings a checkpoint was trained with; falls back to the config.
fn frontend_of(meta: &CheckpointMeta, cfg: &ExperimentConfig) -> Result<(SpectrogramConfig, u32)> {
    let spec = match meta.extra.get(META_SPECTROGRAM) {
        Some(s) => serde_json::from_str(s).context("checkpoint spectrogram metadata")?,
        None => cfg.spectrogram,
    };
    let sr = match meta.extra.get(META_SAMPLE_RATE) {
        Some(s) => s.parse().context("checkpoint sample-rate metadata")?,
        None => SYNTH_SAMPLE_RATE,
    };
    Ok((spec, sr))
}

fn load_split(path: &Path, split: Split, cfg: &ExperimentConfig) -> Result<Vec<AudioUtterance>> {
    let m = load_manifest(path).with_context(|| format!("manifest {}", path.display()))?;
    m.check_alphabet(&cfg.alphabet)?;
    Ok(m.load_audio(split)?)
}

fn check_rate(audio: &[AudioUtterance], sr: u32, what: &str) -> Result<()> {
    if let Some(a) = audio.iter().find(|a| a.sample_rate != sr) {
        bail!("{what}: audio at {} Hz, model expects {sr} Hz", a.sample_rate);
    }
    Ok(())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

pub fn train<T: Scalar>(cfg: &ExperimentConfig) -> Result<()> {
    let tm = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| anyhow!("train_manifest is not set"))?;
    let train_audio = load_split(tm, Split::Train, cfg)?;
    let holdout_audio = match &cfg.holdout_manifest {
        Some(h) => load_split(h, Split::Holdout, cfg)?,
        None => Vec::new(),
    };
    ensure!(!train_audio.is_empty(), "training manifest is empty");
    let sr = train_audio[0].sample_rate;
    check_rate(&train_audio, sr, "train")?;
    check_rate(&holdout_audio, sr, "holdout")?;
    let data = TrainData::<T>::from_audio(&train_audio, &holdout_audio, cfg.spectrogram)?;
    let texts: Vec<&str> = data.train.iter().map(|e| e.transcript.as_str()).collect();
    let model = Model::<T>::new(cfg.model_spec(&texts), cfg.train.seed)?;
    let reference = match &cfg.reference_checkpoint {
        Some(p) => Some(load_checkpoint::<T>(p).with_context(|| format!("reference {}", p.display()))?.0),
        None => None,
    };
    eprintln!(
        "training {} parameters on {} utterances ({} held out)",
        model.param_count(),
        data.train.len(),
        data.holdout.len()
    );
    let (model, log) = deskasr::trainer::train(&cfg.train, model, &data, reference.as_ref())?;
    for r in log.records() {
        eprintln!(
            "epoch {} loss {:.4} cer {} ({:.1}s)",
            r.epoch,
            r.loss,
            r.cer.map_or("-".into(), |c| format!("{c:.4}")),
            r.seconds
        );
    }
    let mut extra = BTreeMap::new();
    extra.insert(META_SPECTROGRAM.into(), serde_json::to_string(&cfg.spectrogram)?);
    extra.insert(META_SAMPLE_RATE.into(), sr.to_string());
    let meta = CheckpointMeta {
        epoch: cfg.train.epochs,
        seed: cfg.train.seed,
        loss_weights: schedule_weights(cfg),
        extra,
    };
    let ck = cfg.output_dir.join("model.ckpt");
    save_checkpoint(&model, &meta, &ck)?;
    std::fs::write(cfg.output_dir.join("run_log.jsonl"), log.to_lines())?;
    println!("{}", ck.display());
    Ok(())
}

fn schedule_weights(cfg: &ExperimentConfig) -> Vec<f64> {
    use deskasr::trainer::LossSchedule::*;
    match cfg.train.schedule {
        Joint { ce, ctc, gram } => vec![ce, ctc, gram],
        _ => vec![1.0],
    }
}

/// Greedy unless a beam wider than one or an LM is configured.
struct Transcriber<T: Scalar> {
    model: Model<T>,
    lm: Option<CharLm>,
    head: DecodeHead,
    beam: bool,
    cfg: deskasr::decoder::BeamConfig,
    spectrogram: SpectrogramConfig,
    sample_rate: u32,
}

impl<T: Scalar> Transcriber<T> {
    fn load(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Self> {
        let (model, meta) =
            load_checkpoint::<T>(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
        let (spectrogram, sample_rate) = frontend_of(&meta, cfg)?;
        let lm = match &cfg.lm_path {
            Some(p) => Some(CharLm::load(p).with_context(|| format!("LM {}", p.display()))?),
            None => None,
        };
        let head = if model.spec.grams.is_some() { cfg.train.schedule.decode_head() } else { DecodeHead::Char };
        Ok(Self {
            beam: cfg.beam.beam_width > 1 || lm.is_some(),
            model,
            lm,
            head,
            cfg: cfg.beam.clone(),
            spectrogram,
            sample_rate,
        })
    }

    fn transcribe(&self, audio: &AudioUtterance) -> Result<String> {
        ensure!(
            audio.sample_rate == self.sample_rate,
            "audio at {} Hz, model expects {} Hz",
            audio.sample_rate,
            self.sample_rate
        );
        let power = compute_power_spectrogram::<T>(audio, &self.spectrogram)?.values;
        if self.beam && self.head == DecodeHead::Char {
            let lp = self.model.infer(&power)?.char_log_probs;
            return Ok(beam_search_decode(&lp, &self.model.spec.alphabet, self.lm.as_ref(), &self.cfg)?);
        }
        Ok(decode_utterance(&self.model, &power, self.head)?)
    }
}

#[derive(Serialize)]
struct EvalLine<'a> {
    index: usize,
    reference: &'a str,
    hypothesis: &'a str,
    cer: Option<f64>,
}

fn report(cfg: &ExperimentConfig, refs: &[String], hyps: &[String]) -> Result<()> {
    let r = score_corpus(refs.iter().zip(hyps).map(|(r, h)| (r.as_str(), h.as_str(), None)))?;
    let mut lines: Vec<String> = refs
        .iter()
        .zip(hyps)
        .enumerate()
        .map(|(i, (r, h))| {
            serde_json::to_string(&EvalLine {
                index: i,
                reference: r,
                hypothesis: h,
                cer: deskasr::harness::cer(r, h).ok(),
            })
        })
        .collect::<Result<_, _>>()?;
    lines.push(serde_json::json!({"summary": {"cer": r.cer, "wer": r.wer, "utterances": r.utterances}}).to_string());
    write_lines(&cfg.output_dir.join("eval.jsonl"), &lines)?;
    println!("utterances {}", r.utterances);
    println!("CER {:.6}", r.cer);
    println!("WER {:.6}", r.wer);
    Ok(())
}

fn transcripts(path: &Path) -> Result<Vec<String>> {
    match load_manifest(path).with_context(|| format!("manifest {}", path.display()))? {
        DatasetManifest::Files(es) => Ok(es.into_iter().map(|e| e.transcript).collect()),
        DatasetManifest::Synthetic(c) => Ok(gen_synthetic_dataset(&c)?
            .holdout
            .into_iter()
            .map(|u| u.transcript.unwrap_or_default())
            .collect()),
    }
}

pub fn eval_transcripts(cfg: &ExperimentConfig, reference: &Path, hyp: &Path) -> Result<()> {
    let (r, h) = (transcripts(reference)?, transcripts(hyp)?);
    ensure!(r.len() == h.len(), "reference has {} lines, hypothesis {}", r.len(), h.len());
    report(cfg, &r, &h)
}

pub fn eval_model<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, manifest: &Path) -> Result<()> {
    let t = Transcriber::<T>::load(cfg, checkpoint)?;
    let audio = load_split(manifest, Split::Holdout, cfg)?;
    let refs: Vec<String> = audio.iter().map(|a| a.transcript.clone().unwrap_or_default()).collect();
    let hyps: Vec<String> = audio.iter().map(|a| t.transcribe(a)).collect::<Result<_>>()?;
    report(cfg, &refs, &hyps)
}

pub fn decode<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, audio: &[PathBuf]) -> Result<()> {
    let t = Transcriber::<T>::load(cfg, checkpoint)?;
    for p in audio {
        let a = read_wav(p)?;
        println!("{}\t{}", p.display(), t.transcribe(&a).with_context(|| p.display().to_string())?);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AlignLine {
    index: usize,
    transcript: String,
    frames: Vec<usize>,
}

pub fn align(cfg: &ExperimentConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let (model, meta) = load_checkpoint::<f64>(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let (spectrogram, sr) = frontend_of(&meta, cfg)?;
    let audio = load_split(manifest, Split::Train, cfg)?;
    check_rate(&audio, sr, "align")?;
    let mut lines = Vec::with_capacity(audio.len());
    for (i, a) in audio.iter().enumerate() {
        let transcript = a.transcript.clone().unwrap_or_default();
        let power = compute_power_spectrogram::<f64>(a, &spectrogram)?.values;
        let lp = model.infer(&power)?.char_log_probs;
        let label = model.spec.alphabet.encode(&transcript)?;
        let al = viterbi_align(&lp, &label).with_context(|| format!("utterance {i}"))?;
        lines.push(serde_json::to_string(&AlignLine {
            index: i,
            transcript,
            frames: al.frames,
        })?);
    }
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    write_lines(out, &lines)?;
    println!("{}", out.display());
    Ok(())
}

fn read_alignments(path: &Path) -> Result<Vec<Alignment>> {
    std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let a: AlignLine =
                serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))?;
            Ok(Alignment::new(a.frames))
        })
        .collect()
}

/// Sums per-utterance correlations, then picks the peak with the same tie rule
/// as a single correlation.
pub fn xcorr(a: &Path, b: &Path, max_lag: usize) -> Result<()> {
    let (xa, xb) = (read_alignments(a)?, read_alignments(b)?);
    ensure!(xa.len() == xb.len(), "{} vs {} alignments", xa.len(), xb.len());
    ensure!(!xa.is_empty(), "no alignments");
    let mut pooled: Option<(Vec<isize>, Vec<f64>)> = None;
    for (i, (p, q)) in xa.iter().zip(&xb).enumerate() {
        let c = alignment_xcorr(p, q, max_lag).with_context(|| format!("utterance {i}"))?;
        match &mut pooled {
            None => pooled = Some((c.lags, c.values)),
            Some((_, v)) => v.iter_mut().zip(&c.values).for_each(|(s, x)| *s += x),
        }
    }
    let (lags, values) = pooled.expect("non-empty");
    let mut peak = 0;
    for i in 1..lags.len() {
        let (vi, vp) = (values[i], values[peak]);
        if vi > vp || (vi == vp && (lags[i].abs(), lags[i]) < (lags[peak].abs(), lags[peak])) {
            peak = i;
        }
    }
    let n = xa.len() as f64;
    println!(
        "{}",
        serde_json::json!({
            "utterances": xa.len(),
            "peak_lag": lags[peak],
            "peak_value": values[peak] / n,
            "lags": lags,
            "values": values.iter().map(|v| v / n).collect::<Vec<_>>(),
        })
    );
    Ok(())
}

pub fn gradcheck(all: bool, component: Option<&str>, seed: u64, eps: f64, tol: f64) -> Result<()> {
    let reports = match (all, component) {
        (_, Some(c)) => {
            ensure!(COMPONENTS.contains(&c), "unknown component {c:?}; known: {}", COMPONENTS.join(", "));
            vec![grad_check(c, seed, eps)?]
        }
        (true, None) => grad_check_all(seed, eps),
        (false, None) => bail!("pass --all or --component NAME"),
    };
    let mut failed = 0;
    for r in &reports {
        let ok = r.passes(tol);
        failed += usize::from(!ok);
        println!(
            "{:<12} {} max_rel_err {:.3e} over {} coords (worst {}: analytic {:.6e}, numeric {:.6e})",
            r.component,
            if ok { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.coordinates,
            r.worst_index,
            r.analytic,
            r.numeric
        );
    }
    if failed > 0 {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}

pub fn serve<T: Scalar + Send + Sync + 'static>(checkpoint: &Path, addr: &str) -> Result<()> {
    let (model, meta) = load_checkpoint::<T>(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let (spectrogram, sr) = frontend_of(&meta, &ExperimentConfig::default())?;
    let server = Server::bind(addr, Arc::new(model), spectrogram, sr)?;
    eprintln!("listening on {}", server.local_addr()?);
    server.run();
    Ok(())
}

pub fn bench<T: Scalar + Send + Sync + 'static>(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    clock: Clock,
    transport: Transport,
) -> Result<()> {
    let (model, spectrogram, sr) = match checkpoint {
        Some(p) => {
            let (m, meta) = load_checkpoint::<T>(p).with_context(|| format!("checkpoint {}", p.display()))?;
            let (s, sr) = frontend_of(&meta, cfg)?;
            (m, s, sr)
        }
        None => (Model::<T>::new(cfg.model_spec::<&str>(&[]), cfg.train.seed)?, cfg.spectrogram, SYNTH_SAMPLE_RATE),
    };
    let audio = match manifest {
        Some(p) => load_split(p, Split::Holdout, cfg)?,
        None => {
            let d = gen_synthetic_dataset(&SynthConfig {
                train: 0,
                holdout: cfg.streams.max(1),
                ..SynthConfig::default()
            })?;
            d.holdout
        }
    };
    check_rate(&audio, sr, "bench")?;
    let stats = deskasr::streaming::bench(
        Arc::new(model),
        &audio,
        spectrogram,
        &BenchConfig {
            streams: cfg.streams,
            packet_ms: cfg.packet_ms,
            clock,
            transport,
        },
    )?;
    let text = stats.to_lines();
    std::fs::write(cfg.output_dir.join("bench.jsonl"), &text)?;
    let s = &stats.summary;
    println!(
        "streams {} packet_ms {} p50_ms {:.3} p98_ms {:.3} rtf {:.4}",
        s.streams, s.packet_ms, s.p50_ms, s.p98_ms, s.rtf
    );
    Ok(())
}

pub fn synth_data(
    out: &Path,
    seed: u64,
    train: Option<usize>,
    holdout: Option<usize>,
    alphabet: Option<&str>,
) -> Result<()> {
    let mut c = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    if let Some(n) = train {
        c.train = n;
    }
    if let Some(n) = holdout {
        c.holdout = n;
    }
    if let Some(a) = alphabet {
        c.alphabet = a.parse()?;
    }
    let d = gen_synthetic_dataset(&c)?;
    std::fs::create_dir_all(out.join("wav"))?;
    for (name, split) in [("train", &d.train), ("holdout", &d.holdout)] {
        let mut tsv = String::new();
        for (i, u) in split.iter().enumerate() {
            let rel = format!("wav/{name}_{i:05}.wav");
            write_wav(&out.join(&rel), u)?;
            tsv.push_str(&format!("{rel}\t{}\n", u.transcript.as_deref().unwrap_or("")));
        }
        std::fs::write(out.join(format!("{name}.tsv")), tsv)?;
    }
    std::fs::write(out.join("synth.json"), DatasetManifest::Synthetic(c).to_text())?;
    println!("{} train, {} holdout utterances in {}", d.train.len(), d.holdout.len(), out.display());
    Ok(())
}

pub fn lm_train(cfg: &ExperimentConfig, corpus: Option<&Path>, manifest: Option<&Path>, out: &Path) -> Result<()> {
    let texts: Vec<String> = match (corpus, manifest) {
        (Some(p), _) => std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        (None, Some(m)) => load_split(m, Split::Train, cfg)?
            .into_iter()
            .filter_map(|u| u.transcript)
            .collect(),
        (None, None) => bail!("pass --corpus or --manifest"),
    };
    let lm = train_char_lm(&texts, &cfg.alphabet, cfg.lm_order, cfg.lm_k)?;
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    lm.save(out)?;
    println!("{}", out.display());
    Ok(())
}
