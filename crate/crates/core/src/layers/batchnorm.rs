use super::{LayerError, Mode};
use crate::params::{named, NamedTensor, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const BN_EPSILON: f64 = 1e-5;

/// Sequence-wise batch normalization: statistics are pooled over every
/// (utterance, timestep) row of a batch, per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: vec![T::one(); features],
            beta: vec![T::zero(); features],
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum: 0.1,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::new(self.features());
        z.gamma.fill(T::zero());
        z
    }

    /// Eval-mode affine map of one row.
    #[inline]
    pub fn eval_row(&self, x: &[T], out: &mut [T]) {
        let eps = T::lit(BN_EPSILON);
        for f in 0..x.len() {
            let inv = T::one() / (self.running_var[f] + eps).sqrt();
            out[f] = self.gamma[f] * ((x[f] - self.running_mean[f]) * inv) + self.beta[f];
        }
    }

    /// Folds one train-mode batch into the running statistics.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        let (Some(mean), Some(var)) = (&cache.batch_mean, &cache.batch_var) else {
            return;
        };
        let m = T::lit(self.momentum);
        let n = T::from_count(cache.count);
        let unbias = if cache.count > 1 { n / (n - T::one()) } else { T::one() };
        for f in 0..self.features() {
            self.running_mean[f] = (T::one() - m) * self.running_mean[f] + m * mean[f];
            self.running_var[f] = (T::one() - m) * self.running_var[f] + m * var[f] * unbias;
        }
    }
}

/// Only γ and β are trainable; running statistics are buffers.
impl<T: Scalar> ParamSet<T> for BatchNorm<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let f = [self.features()];
        vec![named("gamma", &f, &self.gamma), named("beta", &f, &self.beta)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    mode: Mode,
    normalized: Vec<Matrix<T>>,
    inv_std: Vec<T>,
    count: usize,
    batch_mean: Option<Vec<T>>,
    batch_var: Option<Vec<T>>,
}

/// Normalizes a batch of `T_i × F` sequences and applies `γ·x̂ + β`.
pub fn batchnorm_seq<T: Scalar>(
    batch: &[Matrix<T>],
    bn: &BatchNorm<T>,
    mode: Mode,
) -> Result<(Vec<Matrix<T>>, BatchNormCache<T>), LayerError> {
    let f = bn.features();
    if let Some(m) = batch.iter().find(|m| m.cols() != f) {
        return Err(LayerError::Shape(format!("batch norm over {f} features got width {}", m.cols())));
    }
    let count: usize = batch.iter().map(Matrix::rows).sum();
    let eps = T::lit(BN_EPSILON);
    match mode {
        Mode::Eval => {
            let out: Vec<Matrix<T>> = batch
                .iter()
                .map(|x| {
                    let mut y = x.zeros_like();
                    for t in 0..x.rows() {
                        bn.eval_row(x.row(t), y.row_mut(t));
                    }
                    y
                })
                .collect();
            let inv_std = bn.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let normalized = batch
                .iter()
                .map(|x| {
                    let mut n = x.clone();
                    for t in 0..n.rows() {
                        for (j, v) in n.row_mut(t).iter_mut().enumerate() {
                            *v = (*v - bn.running_mean[j]) / (bn.running_var[j] + eps).sqrt();
                        }
                    }
                    n
                })
                .collect();
            Ok((
                out,
                BatchNormCache {
                    mode,
                    normalized,
                    inv_std,
                    count,
                    batch_mean: None,
                    batch_var: None,
                },
            ))
        }
        Mode::Train => {
            if count < 2 {
                return Err(LayerError::InsufficientSamples(count));
            }
            let n = T::from_count(count);
            let mut mean = vec![T::zero(); f];
            for x in batch {
                for row in x.iter_rows() {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![T::zero(); f];
            for x in batch {
                for row in x.iter_rows() {
                    for j in 0..f {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut normalized = Vec::with_capacity(batch.len());
            let mut out = Vec::with_capacity(batch.len());
            for x in batch {
                let mut xn = x.zeros_like();
                let mut y = x.zeros_like();
                for t in 0..x.rows() {
                    for j in 0..f {
                        let v = (x[(t, j)] - mean[j]) * inv_std[j];
                        xn[(t, j)] = v;
                        y[(t, j)] = bn.gamma[j] * v + bn.beta[j];
                    }
                }
                normalized.push(xn);
                out.push(y);
            }
            Ok((
                out,
                BatchNormCache {
                    mode,
                    normalized,
                    inv_std,
                    count,
                    batch_mean: Some(mean),
                    batch_var: Some(var),
                },
            ))
        }
    }
}

/// Returns `(dX per sequence, dγ/dβ packed as a BatchNorm)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &[Matrix<T>],
    bn: &BatchNorm<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Vec<Matrix<T>>, BatchNorm<T>), LayerError> {
    if grad_out.len() != cache.normalized.len()
        || grad_out.iter().zip(&cache.normalized).any(|(g, n)| g.shape() != n.shape())
    {
        return Err(LayerError::Shape("batch norm gradient does not match cache".into()));
    }
    let f = bn.features();
    let mut grads = bn.zeros_like();
    for (g, xn) in grad_out.iter().zip(&cache.normalized) {
        for t in 0..g.rows() {
            for j in 0..f {
                grads.beta[j] += g[(t, j)];
                grads.gamma[j] += g[(t, j)] * xn[(t, j)];
            }
        }
    }
    let dx = match cache.mode {
        Mode::Eval => grad_out
            .iter()
            .map(|g| {
                let mut d = g.clone();
                for t in 0..d.rows() {
                    for (j, v) in d.row_mut(t).iter_mut().enumerate() {
                        *v *= bn.gamma[j] * cache.inv_std[j];
                    }
                }
                d
            })
            .collect(),
        Mode::Train => {
            let n = T::from_count(cache.count);
            grad_out
                .iter()
                .zip(&cache.normalized)
                .map(|(g, xn)| {
                    let mut d = g.zeros_like();
                    for t in 0..g.rows() {
                        for j in 0..f {
                            let k = bn.gamma[j] * cache.inv_std[j] / n;
                            d[(t, j)] = k * (n * g[(t, j)] - grads.beta[j] - xn[(t, j)] * grads.gamma[j]);
                        }
                    }
                    d
                })
                .collect()
        }
    };
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grads_close, numeric_grad, rng};

    fn batch(seed: u64) -> Vec<Matrix<f64>> {
        let mut r = rng(seed);
        vec![Matrix::uniform(4, 3, 2.0, &mut r), Matrix::uniform(6, 3, 2.0, &mut r)]
    }

    #[test]
    fn standardized_input_passes_through() {
        let b = batch(1);
        let bn = BatchNorm::<f64>::new(3);
        let (y, _) = batchnorm_seq(&b, &bn, Mode::Train).unwrap();
        let (z, _) = batchnorm_seq(&y, &bn, Mode::Train).unwrap();
        for (a, c) in y.iter().zip(&z) {
            assert!(a.max_abs_diff(c) < 1e-4);
        }
    }

    #[test]
    fn eval_mode_is_affine() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.running_mean = vec![1.0, -2.0];
        bn.running_var = vec![4.0, 0.25];
        bn.gamma = vec![2.0, 1.0];
        bn.beta = vec![0.5, 0.0];
        let x = Matrix::from_rows(&[vec![3.0, -1.0]]);
        let (y, _) = batchnorm_seq(&[x], &bn, Mode::Eval).unwrap();
        let s0 = (4.0 + BN_EPSILON).sqrt();
        let s1 = (0.25 + BN_EPSILON).sqrt();
        assert!((y[0][(0, 0)] - (2.0 * 2.0 / s0 + 0.5)).abs() < 1e-12);
        assert!((y[0][(0, 1)] - 1.0 / s1).abs() < 1e-12);
    }

    #[test]
    fn single_row_train_batch_is_rejected() {
        let bn = BatchNorm::<f64>::new(2);
        let err = batchnorm_seq(&[Matrix::zeros(1, 2)], &bn, Mode::Train).unwrap_err();
        assert_eq!(err, LayerError::InsufficientSamples(1));
    }

    #[test]
    fn running_stats_update() {
        let b = batch(2);
        let mut bn = BatchNorm::<f64>::new(3);
        let (_, cache) = batchnorm_seq(&b, &bn, Mode::Train).unwrap();
        bn.update_running(&cache);
        let mean0: f64 = b.iter().flat_map(|m| (0..m.rows()).map(move |t| m[(t, 0)])).sum::<f64>() / 10.0;
        assert!((bn.running_mean[0] - 0.1 * mean0).abs() < 1e-12);
    }

    fn check_grads(mode: Mode) {
        let b = batch(3);
        let mut r = rng(4);
        let mut bn = BatchNorm::<f64>::new(3);
        bn.gamma = vec![0.7, 1.3, -0.4];
        bn.beta = vec![0.1, 0.2, 0.3];
        bn.running_mean = vec![0.2, -0.1, 0.05];
        bn.running_var = vec![0.9, 1.4, 0.6];
        let w: Vec<Matrix<f64>> = b.iter().map(|m| Matrix::uniform(m.rows(), 3, 1.0, &mut r)).collect();
        let loss = |b: &[Matrix<f64>], bn: &BatchNorm<f64>| {
            let (y, _) = batchnorm_seq(b, bn, mode).unwrap();
            y.iter()
                .zip(&w)
                .map(|(a, c)| a.as_slice().iter().zip(c.as_slice()).map(|(p, q)| p * q).sum::<f64>())
                .sum::<f64>()
        };
        let (_, cache) = batchnorm_seq(&b, &bn, mode).unwrap();
        let (dx, dp) = batchnorm_backward(&w, &bn, &cache).unwrap();
        for i in 0..b.len() {
            let num = numeric_grad(b[i].as_slice(), |v| {
                let mut bb = b.clone();
                bb[i].as_mut_slice().copy_from_slice(v);
                loss(&bb, &bn)
            });
            assert_grads_close(dx[i].as_slice(), &num, 1e-4, "dx");
        }
        let num = numeric_grad(&bn.gamma, |v| {
            let mut q = bn.clone();
            q.gamma.copy_from_slice(v);
            loss(&b, &q)
        });
        assert_grads_close(&dp.gamma, &num, 1e-4, "dgamma");
        let num = numeric_grad(&bn.beta, |v| {
            let mut q = bn.clone();
            q.beta.copy_from_slice(v);
            loss(&b, &q)
        });
        assert_grads_close(&dp.beta, &num, 1e-4, "dbeta");
    }

    #[test]
    fn train_gradients_match_finite_differences() {
        check_grads(Mode::Train);
    }

    #[test]
    fn eval_gradients_match_finite_differences() {
        check_grads(Mode::Eval);
    }
}
