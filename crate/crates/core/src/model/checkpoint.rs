use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Model;
use super::spec::{ModelSpec, RecurrentKind};
use super::ModelError;
use crate::frontend::FeatureStats;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub loss_weights: Vec<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec: ModelSpec,
    meta: CheckpointMeta,
    feature_stats: FeatureStats,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint: spec, metadata and named `f64` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub meta: CheckpointMeta,
    pub feature_stats: FeatureStats,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

/// What changed while adapting a checkpoint to a requested spec.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Recurrent slots trained as full BGRU and now evaluated chunked.
    pub bidirectional_as_chunked: Vec<usize>,
}

impl LoadReport {
    pub fn is_flagged(&self) -> bool {
        !self.bidirectional_as_chunked.is_empty()
    }
}

/// Layout: magic, `u32` manifest length, `u32` CRC32 of the preceding bytes
/// plus manifest, JSON manifest, then little-endian `f64` tensor data.
pub fn write_checkpoint<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta) -> Result<Vec<u8>, ModelError> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for ((name, shape), values) in model.state_layout().into_iter().zip(model.state_values()) {
        let start = blob.len();
        for v in values {
            blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            dtype: "f64".into(),
            shape,
            offset: start,
            crc32: crc32fast::hash(&blob[start..]),
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        meta: meta.clone(),
        feature_stats: model.feature_stats.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ModelError::Format(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| ModelError::Format("manifest too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    let mut h = crc32fast::Hasher::new();
    h.update(CHECKPOINT_MAGIC);
    h.update(&len.to_le_bytes());
    h.update(&json);
    out.extend_from_slice(&h.finalize().to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < 12 {
        return Err(ModelError::Checksum("file shorter than the header".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let stored = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if 12 + len > bytes.len() {
        return Err(ModelError::Checksum("manifest length exceeds file".into()));
    }
    let json = &bytes[12..12 + len];
    let mut h = crc32fast::Hasher::new();
    h.update(&bytes[..8]);
    h.update(json);
    if h.finalize() != stored {
        return Err(ModelError::Checksum("header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| ModelError::Format(e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: manifest.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let blob = &bytes[12 + len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(ModelError::Format(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        if end > blob.len() {
            return Err(ModelError::Format(format!("tensor {} runs past the end of the file", e.name)));
        }
        let raw = &blob[e.offset..end];
        if crc32fast::hash(raw) != e.crc32 {
            return Err(ModelError::Checksum(format!("tensor {}", e.name)));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name, e.shape, values));
    }
    Ok(Checkpoint {
        spec: manifest.spec,
        meta: manifest.meta,
        feature_stats: manifest.feature_stats,
        tensors,
    })
}

impl Checkpoint {
    /// Instantiates the stored weights under `spec`, which must share the
    /// stored tensor layout.
    pub fn into_model<T: Scalar>(self, spec: ModelSpec) -> Result<Model<T>, ModelError> {
        let mut model = Model::<T>::new(spec, 0)?;
        let mut by_name: BTreeMap<String, (Vec<usize>, Vec<f64>)> =
            self.tensors.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
        let mut values = Vec::new();
        for (name, shape) in model.state_layout() {
            let (found, data) = by_name.remove(&name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if found != shape {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: shape,
                    found,
                });
            }
            values.push(data.into_iter().map(T::lit).collect::<Vec<T>>());
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Format(format!("unexpected tensor {extra}")));
        }
        if self.feature_stats.mean.len() != model.spec.n_bins {
            return Err(ModelError::Format("feature statistics do not match the bin count".into()));
        }
        model.set_state(&values);
        model.feature_stats = self.feature_stats;
        Ok(model)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, write_checkpoint(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta), ModelError> {
    let ck = read_checkpoint(&std::fs::read(path)?)?;
    let meta = ck.meta.clone();
    let spec = ck.spec.clone();
    Ok((ck.into_model(spec)?, meta))
}

/// Loads under a requested evaluation spec. Full-BGRU slots may be requested
/// as chunked or latency-controlled; both run the stored BGRU weights with
/// chunked backward context and are reported.
pub fn load_checkpoint_as<T: Scalar>(
    path: &Path,
    requested: &ModelSpec,
) -> Result<(Model<T>, CheckpointMeta, LoadReport), ModelError> {
    let ck = read_checkpoint(&std::fs::read(path)?)?;
    let mut report = LoadReport::default();
    let mut spec = requested.clone();
    if spec.recurrent.len() != ck.spec.recurrent.len() {
        return Err(ModelError::SpecMismatch("recurrent depth differs".into()));
    }
    for (i, (want, have)) in spec.recurrent.iter_mut().zip(&ck.spec.recurrent).enumerate() {
        match (*want, *have) {
            (w, h) if w == h => {}
            (RecurrentKind::LatencyControlled(c) | RecurrentKind::BidirectionalChunked(c), RecurrentKind::Bidirectional)
            | (RecurrentKind::LatencyControlled(c), RecurrentKind::BidirectionalChunked(_)) => {
                *want = RecurrentKind::BidirectionalChunked(c);
                report.bidirectional_as_chunked.push(i);
            }
            (RecurrentKind::BidirectionalChunked(c), RecurrentKind::BidirectionalChunked(_)) => {
                *want = RecurrentKind::BidirectionalChunked(c);
            }
            (RecurrentKind::Bidirectional, RecurrentKind::BidirectionalChunked(_)) => {}
            (w, h) => {
                return Err(ModelError::SpecMismatch(format!("slot {i}: requested {w:?}, stored {h:?}")));
            }
        }
    }
    let mut base = spec.clone();
    base.recurrent = ck.spec.recurrent.clone();
    if base != ck.spec {
        return Err(ModelError::SpecMismatch("non-recurrent layers differ".into()));
    }
    let meta = ck.meta.clone();
    Ok((ck.into_model(spec)?, meta, report))
}
