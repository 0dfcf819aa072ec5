use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use deskasr::harness::{ConfigError, ExperimentConfig, Precision};

mod commands;

#[derive(Parser)]
#[command(name = "deskasr", version, about = "Streaming speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set output_dir=…`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Wall,
    Virtual,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Socket,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from `train_manifest`, scoring `holdout_manifest` per epoch.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a manifest, or compare two transcript manifests.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `holdout_manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Reference transcripts (with --hyp, no model is run).
        #[arg(long = "ref", requires = "hyp")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "reference")]
        hyp: Option<PathBuf>,
    },
    /// Transcribe WAV files.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        audio: Vec<PathBuf>,
    },
    /// Viterbi alignments of manifest transcripts, one JSON line per utterance.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `train_manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `<output_dir>/alignments.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-correlate two alignment files utterance by utterance.
    Xcorr {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 20)]
        max_lag: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, conflicts_with = "component")]
        all: bool,
        #[arg(long)]
        component: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = deskasr::trainer::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Serve a checkpoint over the framed TCP protocol.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7070")]
        addr: String,
    },
    /// Last-packet latency benchmark with `streams` paced streams.
    Bench {
        #[command(flatten)]
        common: Common,
        /// A fresh model from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `holdout_manifest`, else a small synthetic set.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "wall")]
        clock: ClockArg,
        #[arg(long, default_value_t = 1.0)]
        ns_per_mac: f64,
        #[arg(long, value_enum, default_value = "in-process")]
        transport: TransportArg,
    },
    /// Write a synthetic dataset as WAV files plus manifests.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        alphabet: Option<String>,
    },
    /// Train a character n-gram LM on transcripts.
    LmTrain {
        #[command(flatten)]
        common: Common,
        /// Plain text, one sentence per line.
        #[arg(long, required_unless_present = "manifest")]
        corpus: Option<PathBuf>,
        /// Use manifest transcripts as the corpus.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `lm_path`, else `<output_dir>/lm.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config from file plus overrides; the snapshot is written later by each command.
fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            deskasr::harness::parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for kv in &c.set {
        cfg.apply_override(kv)?;
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

/// Writes `config.txt` into the output directory.
fn snapshot(cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output dir {}", cfg.output_dir.display()))?;
    let p = cfg.output_dir.join("config.txt");
    std::fs::write(&p, cfg.to_text())?;
    Ok(p)
}

fn manifest_or(opt: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    opt.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| anyhow!("no {what} given (flag or config key)"))
}

fn run(cli: Cli) -> Result<()> {
    use commands::*;
    match cli.cmd {
        Cmd::Train { common } => {
            let cfg = load_config(&common)?;
            snapshot(&cfg)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg),
                Precision::F64 => train::<f64>(&cfg),
            }
        }
        Cmd::Eval {
            common,
            checkpoint,
            manifest,
            reference,
            hyp,
        } => {
            let cfg = load_config(&common)?;
            snapshot(&cfg)?;
            match (reference, hyp, checkpoint) {
                (Some(r), Some(h), _) => eval_transcripts(&cfg, &r, &h),
                (_, _, Some(ck)) => {
                    let m = manifest_or(&manifest, &cfg.holdout_manifest, "manifest")?;
                    match cfg.precision {
                        Precision::F32 => eval_model::<f32>(&cfg, &ck, &m),
                        Precision::F64 => eval_model::<f64>(&cfg, &ck, &m),
                    }
                }
                _ => bail!("eval needs --checkpoint, or --ref with --hyp"),
            }
        }
        Cmd::Decode {
            common,
            checkpoint,
            audio,
        } => {
            let cfg = load_config(&common)?;
            snapshot(&cfg)?;
            match cfg.precision {
                Precision::F32 => decode::<f32>(&cfg, &checkpoint, &audio),
                Precision::F64 => decode::<f64>(&cfg, &checkpoint, &audio),
            }
        }
        Cmd::Align {
            common,
            checkpoint,
            manifest,
            out,
        } => {
            let cfg = load_config(&common)?;
            snapshot(&cfg)?;
            let m = manifest_or(&manifest, &cfg.train_manifest, "manifest")?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("alignments.jsonl"));
            align(&cfg, &checkpoint, &m, &out)
        }
        Cmd::Xcorr { a, b, max_lag } => xcorr(&a, &b, max_lag),
        Cmd::Gradcheck {
            all,
            component,
            seed,
            eps,
            tol,
        } => gradcheck(all, component.as_deref(), seed, eps, tol),
        Cmd::Serve {
            common,
            checkpoint,
            addr,
        } => {
            let cfg = load_config(&common)?;
            snapshot(&cfg)?;
            match cfg.precision {
                Precision::F32 => serve::<f32>(&checkpoint, &addr),
                Precision::F64 => serve::<f64>(&checkpoint, &addr),
            }
        }
        Cmd::Bench {
            common,
            checkpoint,
            manifest,
            clock,
            ns_per_mac,
            transport,
        } => {
            let cfg = load_config(&common)?;
            snapshot(&cfg)?;
            let clock = match clock {
                ClockArg::Wall => deskasr::streaming::Clock::Wall,
                ClockArg::Virtual => deskasr::streaming::Clock::Virtual { ns_per_mac },
            };
            let transport = match transport {
                TransportArg::InProcess => deskasr::streaming::Transport::InProcess,
                TransportArg::Socket => deskasr::streaming::Transport::Socket,
            };
            let manifest = manifest.or_else(|| cfg.holdout_manifest.clone());
            match cfg.precision {
                Precision::F32 => bench::<f32>(&cfg, checkpoint.as_deref(), manifest.as_deref(), clock, transport),
                Precision::F64 => bench::<f64>(&cfg, checkpoint.as_deref(), manifest.as_deref(), clock, transport),
            }
        }
        Cmd::SynthData {
            out,
            seed,
            train,
            holdout,
            alphabet,
        } => synth_data(&out, seed, train, holdout, alphabet.as_deref()),
        Cmd::LmTrain {
            common,
            corpus,
            manifest,
            out,
        } => {
            let cfg = load_config(&common)?;
            snapshot(&cfg)?;
            let out = out
                .or_else(|| cfg.lm_path.clone())
                .unwrap_or_else(|| cfg.output_dir.join("lm.txt"));
            lm_train(&cfg, corpus.as_deref(), manifest.as_deref(), &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<ConfigError>() {
                eprintln!("deskasr: config error: {ce}");
                return ExitCode::from(2);
            }
            if let Some(commands::ChecksFailed(n)) = e.downcast_ref::<commands::ChecksFailed>() {
                eprintln!("deskasr: {n} gradient check(s) failed");
                return ExitCode::from(1);
            }
            eprintln!("deskasr: {e:#}");
            ExitCode::from(1)
        }
    }
}
