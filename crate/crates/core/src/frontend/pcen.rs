//! Trainable per-channel energy normalization.
//!
//! `y = (x / (ε + M)^α + δ)^r − δ^r` with `M` a first-order causal smoother of
//! the input power. Parameters are kept in unconstrained form: α, δ, r are
//! stored as logs and the smoother coefficient as a logit.

use serde::{Deserialize, Serialize};

use super::{FrontendError, Spectrogram};
use crate::params::{named, NamedTensor, ParamSet};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Matrix;

pub const DEFAULT_PCEN_EPSILON: f64 = 1e-6;

/// Initial values in the constrained domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcenInit {
    pub alpha: f64,
    pub delta: f64,
    pub r: f64,
    pub s: f64,
    pub epsilon: f64,
}

impl Default for PcenInit {
    fn default() -> Self {
        Self {
            alpha: 0.98,
            delta: 2.0,
            r: 0.5,
            s: 0.025,
            epsilon: DEFAULT_PCEN_EPSILON,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcenParams<T> {
    pub log_alpha: Vec<T>,
    pub log_delta: Vec<T>,
    pub log_r: Vec<T>,
    pub logit_s: Vec<T>,
    /// Fixed, never trained.
    pub epsilon: T,
}

impl<T: Scalar> PcenParams<T> {
    pub fn new(n_bins: usize, init: PcenInit) -> Self {
        let logit = (init.s / (1.0 - init.s)).ln();
        Self {
            log_alpha: vec![T::lit(init.alpha.ln()); n_bins],
            log_delta: vec![T::lit(init.delta.ln()); n_bins],
            log_r: vec![T::lit(init.r.ln()); n_bins],
            logit_s: vec![T::lit(logit); n_bins],
            epsilon: T::lit(init.epsilon),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = vec![T::zero(); self.bins()];
        Self {
            log_alpha: z.clone(),
            log_delta: z.clone(),
            log_r: z.clone(),
            logit_s: z,
            epsilon: T::zero(),
        }
    }

    pub fn bins(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn channels(&self) -> PcenChannels<T> {
        let alpha: Vec<T> = self.log_alpha.iter().map(|v| v.exp()).collect();
        let delta: Vec<T> = self.log_delta.iter().map(|v| v.exp()).collect();
        let r: Vec<T> = self.log_r.iter().map(|v| v.exp()).collect();
        let s = self.logit_s.iter().map(|&v| sigmoid(v)).collect();
        let delta_r = delta.iter().zip(&r).map(|(&d, &r)| d.powf(r)).collect();
        PcenChannels {
            alpha,
            delta,
            r,
            s,
            delta_r,
            epsilon: self.epsilon,
        }
    }
}

impl<T: Scalar> ParamSet<T> for PcenParams<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let f = [self.bins()];
        vec![
            named("log_alpha", &f, &self.log_alpha),
            named("log_delta", &f, &self.log_delta),
            named("log_r", &f, &self.log_r),
            named("logit_s", &f, &self.logit_s),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            &mut self.log_alpha,
            &mut self.log_delta,
            &mut self.log_r,
            &mut self.logit_s,
        ]
    }
}

/// Per-channel parameters in the constrained domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PcenChannels<T> {
    pub alpha: Vec<T>,
    pub delta: Vec<T>,
    pub r: Vec<T>,
    pub s: Vec<T>,
    pub delta_r: Vec<T>,
    pub epsilon: T,
}

impl<T: Scalar> PcenChannels<T> {
    /// Compression of one cell given its smoothed energy.
    #[inline]
    fn cell(&self, f: usize, x: T, m: T) -> T {
        let gain = (self.epsilon + m).powf(-self.alpha[f]);
        (x * gain + self.delta[f]).powf(self.r[f]) - self.delta_r[f]
    }

    /// Advances the smoother by one frame and writes the normalized frame.
    pub fn step(&self, x: &[T], state: &mut PcenState<T>, out: &mut [T]) {
        let first = state.m.is_empty();
        if first {
            state.m = x.to_vec();
        } else {
            for (f, m) in state.m.iter_mut().enumerate() {
                *m = (T::one() - self.s[f]) * *m + self.s[f] * x[f];
            }
        }
        for f in 0..x.len() {
            out[f] = self.cell(f, x[f], state.m[f]);
        }
    }
}

/// Carried smoother state for streaming use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PcenState<T> {
    pub m: Vec<T>,
}

fn check_smoother<T: Scalar>(s: &[T]) -> Result<(), FrontendError> {
    match s.iter().find(|&&v| !(v > T::zero() && v < T::one())) {
        Some(&bad) => Err(FrontendError::InvalidSmoother(bad.as_f64())),
        None => Ok(()),
    }
}

/// Causal energy estimate: `M(0) = x(0)`, `M(t) = (1 − s)·M(t−1) + s·x(t)`.
pub fn pcen_smoother<T: Scalar>(power: &Spectrogram<T>, s: &[T]) -> Result<Matrix<T>, FrontendError> {
    pcen_smoother_with(&power.values, s)
}

pub fn pcen_smoother_with<T: Scalar>(x: &Matrix<T>, s: &[T]) -> Result<Matrix<T>, FrontendError> {
    if s.len() != x.cols() {
        return Err(FrontendError::BinMismatch {
            got: s.len(),
            expected: x.cols(),
        });
    }
    check_smoother(s)?;
    let mut m = Matrix::zeros(x.rows(), x.cols());
    if x.rows() == 0 {
        return Ok(m);
    }
    m.row_mut(0).copy_from_slice(x.row(0));
    for t in 1..x.rows() {
        for f in 0..x.cols() {
            let prev = m[(t - 1, f)];
            m[(t, f)] = (T::one() - s[f]) * prev + s[f] * x[(t, f)];
        }
    }
    Ok(m)
}

/// Intermediates retained for [`pcen_backward`].
#[derive(Clone, Debug)]
pub struct PcenCache<T> {
    x: Matrix<T>,
    m: Matrix<T>,
    ch: PcenChannels<T>,
}

pub fn pcen_forward<T: Scalar>(
    power: &Spectrogram<T>,
    params: &PcenParams<T>,
) -> Result<(Spectrogram<T>, PcenCache<T>), FrontendError> {
    let x = &power.values;
    if params.bins() != x.cols() {
        return Err(FrontendError::BinMismatch {
            got: x.cols(),
            expected: params.bins(),
        });
    }
    let ch = params.channels();
    let m = pcen_smoother_with(x, &ch.s)?;
    let mut y = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        for f in 0..x.cols() {
            let v = ch.cell(f, x[(t, f)], m[(t, f)]);
            if !v.is_finite() {
                return Err(FrontendError::PcenOverflow { frame: t, bin: f });
            }
            y[(t, f)] = v;
        }
    }
    let cache = PcenCache {
        x: x.clone(),
        m,
        ch,
    };
    Ok((Spectrogram::new(y, power.frame_hop_ms, true), cache))
}

/// Exact gradients of [`pcen_forward`], including the reverse-time
/// accumulation through the smoother recursion.
pub fn pcen_backward<T: Scalar>(
    grad_out: &Matrix<T>,
    cache: &PcenCache<T>,
) -> Result<(Matrix<T>, PcenParams<T>), FrontendError> {
    let (rows, cols) = cache.x.shape();
    if grad_out.shape() != (rows, cols) {
        return Err(FrontendError::CacheMismatch {
            got: grad_out.shape(),
            expected: (rows, cols),
        });
    }
    let ch = &cache.ch;
    let mut dx = Matrix::zeros(rows, cols);
    let mut d_alpha = vec![T::zero(); cols];
    let mut d_delta = vec![T::zero(); cols];
    let mut d_r = vec![T::zero(); cols];
    let mut d_s = vec![T::zero(); cols];
    for f in 0..cols {
        let (alpha, delta, r, s) = (ch.alpha[f], ch.delta[f], ch.r[f], ch.s[f]);
        let ln_delta = delta.ln();
        let r_delta_rm1 = r * delta.powf(r - T::one());
        let mut carry = T::zero();
        for t in (0..rows).rev() {
            let g = grad_out[(t, f)];
            let x = cache.x[(t, f)];
            let e = ch.epsilon + cache.m[(t, f)];
            let gain = e.powf(-alpha);
            let u = x * gain + delta;
            let ur = u.powf(r);
            let dy_du = r * ur / u;
            if g != T::zero() {
                dx[(t, f)] += g * dy_du * gain;
                d_alpha[f] -= g * dy_du * x * gain * e.ln();
                d_delta[f] += g * (dy_du - r_delta_rm1);
                d_r[f] += g * (ur * u.ln() - ch.delta_r[f] * ln_delta);
            }
            let dm = g * dy_du * x * (-alpha) * gain / e + carry;
            if t >= 1 {
                dx[(t, f)] += s * dm;
                d_s[f] += dm * (x - cache.m[(t - 1, f)]);
                carry = (T::one() - s) * dm;
            } else {
                dx[(t, f)] += dm;
            }
        }
    }
    let grads = PcenParams {
        log_alpha: d_alpha.iter().zip(&ch.alpha).map(|(&g, &a)| g * a).collect(),
        log_delta: d_delta.iter().zip(&ch.delta).map(|(&g, &d)| g * d).collect(),
        log_r: d_r.iter().zip(&ch.r).map(|(&g, &r)| g * r).collect(),
        logit_s: d_s
            .iter()
            .zip(&ch.s)
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect(),
        epsilon: T::zero(),
    };
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grads_close, numeric_grad, rng};
    use rand::Rng;

    fn spec(m: Matrix<f64>) -> Spectrogram<f64> {
        Spectrogram::new(m, 10.0, false)
    }

    fn random_power(t: usize, f: usize, seed: u64) -> Matrix<f64> {
        let mut r = rng(seed);
        let d = (0..t * f).map(|_| r.random_range(0.01..5.0)).collect();
        Matrix::from_vec(t, f, d)
    }

    #[test]
    fn smoother_constant_is_fixed_point() {
        let x = Matrix::filled(7, 3, 2.5);
        let m = pcen_smoother(&spec(x.clone()), &[0.3, 0.08, 0.9]).unwrap();
        assert!(m.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn smoother_impulse_response() {
        let mut x = Matrix::zeros(5, 1);
        x[(0, 0)] = 1.0;
        let m = pcen_smoother(&spec(x), &[0.5]).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.5, 0.25, 0.125, 0.0625]);
    }

    #[test]
    fn smoother_matches_scalar_loop() {
        let x = random_power(40, 4, 3);
        let s = 0.08;
        let m = pcen_smoother(&spec(x.clone()), &[s; 4]).unwrap();
        for f in 0..4 {
            let mut acc = x[(0, f)];
            for t in 0..40 {
                if t > 0 {
                    acc = acc * (1.0 - s) + x[(t, f)] * s;
                }
                assert!((m[(t, f)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smoother_rejects_bad_coefficient() {
        let x = spec(Matrix::filled(2, 1, 1.0));
        assert!(matches!(pcen_smoother(&x, &[1.0]), Err(FrontendError::InvalidSmoother(_))));
        assert!(matches!(pcen_smoother(&x, &[0.0]), Err(FrontendError::InvalidSmoother(_))));
    }

    #[test]
    fn smoother_is_causal() {
        let x = random_power(20, 2, 9);
        let mut y = x.clone();
        y[(15, 1)] += 10.0;
        let a = pcen_smoother(&spec(x), &[0.2, 0.2]).unwrap();
        let b = pcen_smoother(&spec(y), &[0.2, 0.2]).unwrap();
        for t in 0..15 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(15), b.row(15));
    }

    #[test]
    fn steady_state_value() {
        let mut p = PcenParams::<f64>::new(2, PcenInit::default());
        p.log_alpha = vec![0.0; 2];
        p.log_delta = vec![0.0; 2];
        p.log_r = vec![0.5f64.ln(); 2];
        p.epsilon = 0.0;
        let (y, _) = pcen_forward(&spec(Matrix::filled(4, 2, 3.0)), &p).unwrap();
        for &v in y.values.as_slice() {
            assert!((v - (2f64.sqrt() - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero() {
        let p = PcenParams::<f64>::new(3, PcenInit::default());
        let (y, _) = pcen_forward(&spec(Matrix::zeros(5, 3)), &p).unwrap();
        assert!(y.values.as_slice().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn gain_invariance_of_pure_agc() {
        let mut p = PcenParams::<f64>::new(3, PcenInit::default());
        p.log_alpha = vec![0.0; 3];
        p.log_delta = vec![f64::NEG_INFINITY; 3];
        p.epsilon = 0.0;
        let x = random_power(12, 3, 4);
        let (a, _) = pcen_forward(&spec(x.clone()), &p).unwrap();
        for c in [0.01, 3.0, 1000.0] {
            let (b, _) = pcen_forward(&spec(x.map(|v| v * c)), &p).unwrap();
            assert!(a.values.max_abs_diff(&b.values) < 1e-12);
        }
    }

    fn loss_and_grads(x: &Matrix<f64>, p: &PcenParams<f64>, w: &Matrix<f64>) -> (f64, Matrix<f64>, PcenParams<f64>) {
        let (y, cache) = pcen_forward(&spec(x.clone()), p).unwrap();
        let loss: f64 = y.values.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
        let (dx, dp) = pcen_backward(w, &cache).unwrap();
        (loss, dx, dp)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (t, f) = (9, 3);
        let x = random_power(t, f, 11);
        let w = random_power(t, f, 12).map(|v| v - 2.5);
        let mut p = PcenParams::<f64>::new(f, PcenInit::default());
        let mut r = rng(5);
        for v in p.tensors_mut() {
            for e in v.iter_mut() {
                *e += r.random_range(-0.3..0.3);
            }
        }
        let (_, dx, dp) = loss_and_grads(&x, &p, &w);

        let num_x = numeric_grad(x.as_slice(), |xs| {
            loss_and_grads(&Matrix::from_vec(t, f, xs.to_vec()), &p, &w).0
        });
        assert_grads_close(dx.as_slice(), &num_x, 1e-4, "dx");

        for (k, name) in ["log_alpha", "log_delta", "log_r", "logit_s"].iter().enumerate() {
            let base: Vec<f64> = p.tensors()[k].data.to_vec();
            let num = numeric_grad(&base, |v| {
                let mut q = p.clone();
                q.tensors_mut()[k].copy_from_slice(v);
                loss_and_grads(&x, &q, &w).0
            });
            assert_grads_close(dp.tensors()[k].data, &num, 1e-4, name);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let x = random_power(6, 2, 1);
        let p = PcenParams::<f64>::new(2, PcenInit::default());
        let (_, dx, dp) = loss_and_grads(&x, &p, &Matrix::zeros(6, 2));
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
        assert!(dp.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_frame_chain_rule() {
        let x = Matrix::from_vec(1, 1, vec![2.0]);
        let p = PcenParams::<f64>::new(1, PcenInit::default());
        let (_, dx, dp) = loss_and_grads(&x, &p, &Matrix::filled(1, 1, 1.0));
        let ch = p.channels();
        let (a, d, r, e) = (ch.alpha[0], ch.delta[0], ch.r[0], ch.epsilon);
        // M = x, so y = (x (ε + x)^-α + δ)^r − δ^r
        let gain = (e + 2.0f64).powf(-a);
        let u = 2.0 * gain + d;
        let du_dx = gain - 2.0 * a * gain / (e + 2.0);
        assert!((dx[(0, 0)] - r * u.powf(r - 1.0) * du_dx).abs() < 1e-12);
        assert_eq!(dp.logit_s[0], 0.0);
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let x = random_power(4, 2, 1);
        let p = PcenParams::<f64>::new(2, PcenInit::default());
        let (_, cache) = pcen_forward(&spec(x), &p).unwrap();
        let err = pcen_backward(&Matrix::zeros(3, 2), &cache).unwrap_err();
        assert!(matches!(err, FrontendError::CacheMismatch { .. }));
    }

    #[test]
    fn streaming_step_matches_offline() {
        let x = random_power(10, 3, 8);
        let p = PcenParams::<f64>::new(3, PcenInit::default());
        let (y, _) = pcen_forward(&spec(x.clone()), &p).unwrap();
        let ch = p.channels();
        let mut st = PcenState::default();
        let mut out = vec![0.0; 3];
        for t in 0..10 {
            ch.step(x.row(t), &mut st, &mut out);
            assert_eq!(out.as_slice(), y.values.row(t));
        }
    }
}
