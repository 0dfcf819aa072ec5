use serde::{Deserialize, Serialize};

use super::Spectrogram;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const NORMALIZE_EPSILON: f64 = 1e-8;

/// Per-bin mean and (population) variance over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl FeatureStats {
    /// Zero mean, unit variance: the identity normalization.
    pub fn identity(bins: usize) -> Self {
        Self {
            mean: vec![0.0; bins],
            var: vec![1.0; bins],
        }
    }

    pub fn from_matrices<'a, T: Scalar>(mats: impl IntoIterator<Item = &'a Matrix<T>>) -> Self {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            }
            for row in m.iter_rows() {
                for (f, &v) in row.iter().enumerate() {
                    let v = v.as_f64();
                    sum[f] += v;
                    sq[f] += v * v;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0))
            .collect();
        Self { mean, var }
    }

    pub fn from_spectrograms<'a, T: Scalar>(specs: impl IntoIterator<Item = &'a Spectrogram<T>>) -> Self {
        Self::from_matrices(specs.into_iter().map(|s| &s.values))
    }

    /// Normalizes one frame in place.
    #[inline]
    pub fn apply_row<T: Scalar>(&self, row: &mut [T]) {
        for (f, v) in row.iter_mut().enumerate() {
            let scale = T::lit((self.var[f] + NORMALIZE_EPSILON).sqrt());
            *v = (*v - T::lit(self.mean[f])) / scale;
        }
    }
}

/// Per-bin `(v − mean) / sqrt(var + 1e−8)`.
pub fn feature_normalize<T: Scalar>(spec: &Spectrogram<T>, stats: &FeatureStats) -> Spectrogram<T> {
    let mut values = spec.values.clone();
    for t in 0..values.rows() {
        stats.apply_row(values.row_mut(t));
    }
    Spectrogram::new(values, spec.frame_hop_ms, spec.compressed)
}
