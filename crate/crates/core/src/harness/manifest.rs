use std::path::{Path, PathBuf};

use super::{gen_synthetic_dataset, HarnessError, SynthConfig};
use crate::alphabet::Alphabet;
use crate::frontend::{f64_to_pcm16, AudioUtterance};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub transcript: String,
}

/// Either `audio_path<TAB>transcript` lines, or a JSON synthetic-dataset
/// descriptor (a file whose first non-blank character is `{`).
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetManifest {
    Files(Vec<ManifestEntry>),
    Synthetic(SynthConfig),
}

impl DatasetManifest {
    /// `base` resolves relative audio paths.
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self, HarnessError> {
        let err = |line: usize, reason: String| HarnessError::Manifest {
            path: origin.to_string(),
            line,
            reason,
        };
        if text.trim_start().starts_with('{') {
            return serde_json::from_str(text)
                .map(DatasetManifest::Synthetic)
                .map_err(|e| err(e.line(), e.to_string()));
        }
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (path, transcript) = line
                .split_once('\t')
                .ok_or_else(|| err(i + 1, "expected audio_path<TAB>transcript".into()))?;
            let p = Path::new(path);
            out.push(ManifestEntry {
                audio: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
                transcript: transcript.to_string(),
            });
        }
        Ok(DatasetManifest::Files(out))
    }

    /// Errors on the first transcript with a character outside `alphabet`.
    pub fn check_alphabet(&self, alphabet: &Alphabet) -> Result<(), HarnessError> {
        if let DatasetManifest::Files(entries) = self {
            for (i, e) in entries.iter().enumerate() {
                if let Some(c) = e.transcript.chars().find(|&c| alphabet.index_of(c).is_none()) {
                    return Err(HarnessError::Manifest {
                        path: e.audio.display().to_string(),
                        line: i + 1,
                        reason: format!("transcript character {c:?} is not in the alphabet"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Audio with transcripts attached. A synthetic descriptor yields the
    /// requested split; a file list ignores `split`.
    pub fn load_audio(&self, split: Split) -> Result<Vec<AudioUtterance>, HarnessError> {
        match self {
            DatasetManifest::Files(es) => es
                .iter()
                .map(|e| Ok(read_wav(&e.audio)?.with_transcript(e.transcript.clone())))
                .collect(),
            DatasetManifest::Synthetic(c) => {
                let d = gen_synthetic_dataset(c)?;
                Ok(match split {
                    Split::Train => d.train,
                    Split::Holdout => d.holdout,
                })
            }
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            DatasetManifest::Files(es) => es
                .iter()
                .map(|e| format!("{}\t{}\n", e.audio.display(), e.transcript))
                .collect(),
            DatasetManifest::Synthetic(c) => serde_json::to_string_pretty(c).expect("serializable config") + "\n",
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    DatasetManifest::parse(&text, base, &path.display().to_string())
}

/// Mono 16-bit PCM.
pub fn write_wav(path: &Path, audio: &AudioUtterance) -> Result<(), HarnessError> {
    let werr = |e: hound::Error| HarnessError::Wav {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(werr)?;
    for &s in &audio.samples {
        w.write_sample(f64_to_pcm16(s)).map_err(werr)?;
    }
    w.finalize().map_err(werr)
}

/// Integer or float WAV; multiple channels are averaged.
pub fn read_wav(path: &Path) -> Result<AudioUtterance, HarnessError> {
    let werr = |reason: String| HarnessError::Wav {
        path: path.display().to_string(),
        reason,
    };
    let mut r = hound::WavReader::open(path).map_err(|e| werr(e.to_string()))?;
    let spec = r.spec();
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| werr(e.to_string()))?
        }
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| werr(e.to_string()))?,
    };
    let ch = spec.channels.max(1) as usize;
    let samples = raw.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    AudioUtterance::new(samples, spec.sample_rate).map_err(|e| werr(e.to_string()))
}
