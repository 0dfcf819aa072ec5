use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LayerError;
use crate::params::{named, NamedTensor, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Matrix};

/// 2-D convolution over (frequency, time). Kernel and stride are given as
/// `(frequency, time)`, so `41x11` means 41 frequency taps by 11 time taps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub stride: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(filters: usize, kernel: (usize, usize), in_channels: usize, stride: (usize, usize)) -> Self {
        Self {
            filters,
            kernel,
            in_channels,
            stride,
        }
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        let all = [
            self.filters,
            self.kernel.0,
            self.kernel.1,
            self.in_channels,
            self.stride.0,
            self.stride.1,
        ];
        if all.contains(&0) {
            return Err(LayerError::InvalidConfig(format!("conv spec has a zero field: {self:?}")));
        }
        Ok(())
    }

    /// Symmetric frequency padding on each side.
    pub fn freq_pad(&self) -> usize {
        (self.kernel.0 - 1) / 2
    }

    pub fn out_freq(&self, in_freq: usize) -> Result<usize, LayerError> {
        let padded = in_freq + 2 * self.freq_pad();
        if padded < self.kernel.0 {
            return Err(LayerError::Shape(format!(
                "{in_freq} frequency bins too few for a {}-tap kernel",
                self.kernel.0
            )));
        }
        Ok((padded - self.kernel.0) / self.stride.0 + 1)
    }

    /// `ceil(frames / stride_time)`: causal left padding only.
    pub fn out_time(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride.1)
    }

    /// Weight row length per filter, laid out `(time, freq, channel)`.
    pub fn taps(&self) -> usize {
        self.kernel.1 * self.kernel.0 * self.in_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    /// `filters × (time_taps · freq_taps · in_channels)`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn init<R: Rng + ?Sized>(spec: &Conv2dSpec, rng: &mut R) -> Self {
        let scale = 1.0 / (spec.taps() as f64).sqrt();
        Self {
            weight: Matrix::uniform(spec.filters, spec.taps(), scale, rng),
            bias: vec![T::zero(); spec.filters],
        }
    }

    pub fn zeros(spec: &Conv2dSpec) -> Self {
        Self {
            weight: Matrix::zeros(spec.filters, spec.taps()),
            bias: vec![T::zero(); spec.filters],
        }
    }
}

impl<T: Scalar> ParamSet<T> for Conv2dParams<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        vec![
            named("weight", &[self.weight.rows(), self.weight.cols()], self.weight.as_slice()),
            named("bias", &[self.bias.len()], &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

fn check_input(spec: &Conv2dSpec, cols: usize) -> Result<usize, LayerError> {
    spec.validate()?;
    if cols % spec.in_channels != 0 {
        return Err(LayerError::Shape(format!(
            "input width {cols} is not a multiple of {} channels",
            spec.in_channels
        )));
    }
    Ok(cols / spec.in_channels)
}

/// Frequency-tap range `[i0, i1)` valid for output bin `fo`, and the first
/// input bin it touches.
#[inline]
fn tap_range(spec: &Conv2dSpec, fo: usize, in_freq: usize) -> (usize, usize, usize) {
    let start = (fo * spec.stride.0) as isize - spec.freq_pad() as isize;
    let i0 = (-start).max(0) as usize;
    let i1 = ((in_freq as isize - start).min(spec.kernel.0 as isize)).max(0) as usize;
    (i0, i1, (start + i0 as isize) as usize)
}

/// Output frame `k`. `input(t)` returns input frame `t` (`None` is zero
/// padding). Only frames `k·stride_time − (time_taps − 1) ..= k·stride_time`
/// are read.
pub fn conv2d_frame<'a, T: Scalar>(
    spec: &Conv2dSpec,
    params: &Conv2dParams<T>,
    in_freq: usize,
    k: usize,
    input: impl Fn(isize) -> Option<&'a [T]>,
    out: &mut [T],
) {
    let (kf, kt) = spec.kernel;
    let c = spec.in_channels;
    let out_freq = (in_freq + 2 * spec.freq_pad() - kf) / spec.stride.0 + 1;
    for fo in 0..out_freq {
        let (i0, i1, f0) = tap_range(spec, fo, in_freq);
        for co in 0..spec.filters {
            let w = params.weight.row(co);
            let mut acc = params.bias[co];
            for j in 0..kt {
                let t = (k * spec.stride.1 + j) as isize - (kt as isize - 1);
                if let Some(row) = input(t) {
                    if i1 > i0 {
                        let wo = (j * kf + i0) * c;
                        let len = (i1 - i0) * c;
                        acc += dot(&w[wo..wo + len], &row[f0 * c..f0 * c + len]);
                    }
                }
            }
            out[fo * spec.filters + co] = acc;
        }
    }
}

/// Cross-correlation with symmetric "same" frequency padding and causal
/// left time padding. Input `T × (F·C)`, output `ceil(T/s_t) × (F'·filters)`.
pub fn conv2d<T: Scalar>(
    x: &Matrix<T>,
    spec: &Conv2dSpec,
    params: &Conv2dParams<T>,
) -> Result<Matrix<T>, LayerError> {
    let in_freq = check_input(spec, x.cols())?;
    let out_freq = spec.out_freq(in_freq)?;
    let frames = spec.out_time(x.rows());
    let mut y = Matrix::zeros(frames, out_freq * spec.filters);
    for k in 0..frames {
        let input = |t: isize| (t >= 0 && (t as usize) < x.rows()).then(|| x.row(t as usize));
        conv2d_frame(spec, params, in_freq, k, input, y.row_mut(k));
    }
    Ok(y)
}

/// Returns `(dX, dParams)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Matrix<T>,
    spec: &Conv2dSpec,
    params: &Conv2dParams<T>,
    grad_out: &Matrix<T>,
) -> Result<(Matrix<T>, Conv2dParams<T>), LayerError> {
    let in_freq = check_input(spec, x.cols())?;
    let out_freq = spec.out_freq(in_freq)?;
    if grad_out.shape() != (spec.out_time(x.rows()), out_freq * spec.filters) {
        return Err(LayerError::Shape("conv gradient shape mismatch".into()));
    }
    let (kf, kt) = spec.kernel;
    let c = spec.in_channels;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dp = Conv2dParams::zeros(spec);
    for k in 0..grad_out.rows() {
        let g_row = grad_out.row(k);
        for fo in 0..out_freq {
            let (i0, i1, f0) = tap_range(spec, fo, in_freq);
            let len = (i1.saturating_sub(i0)) * c;
            for co in 0..spec.filters {
                let g = g_row[fo * spec.filters + co];
                if g == T::zero() {
                    continue;
                }
                dp.bias[co] += g;
                if len == 0 {
                    continue;
                }
                for j in 0..kt {
                    let t = (k * spec.stride.1 + j) as isize - (kt as isize - 1);
                    if t < 0 || t as usize >= x.rows() {
                        continue;
                    }
                    let t = t as usize;
                    let wo = (j * kf + i0) * c;
                    axpy(g, &x.row(t)[f0 * c..f0 * c + len], &mut dp.weight.row_mut(co)[wo..wo + len]);
                    axpy(g, &params.weight.row(co)[wo..wo + len], &mut dx.row_mut(t)[f0 * c..f0 * c + len]);
                }
            }
        }
    }
    Ok((dx, dp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grads_close, numeric_grad, rng};

    /// Six nested loops straight from the definition.
    fn naive(x: &Matrix<f64>, spec: &Conv2dSpec, p: &Conv2dParams<f64>) -> Matrix<f64> {
        let c = spec.in_channels;
        let f_in = x.cols() / c;
        let (kf, kt) = spec.kernel;
        let pad = ((kf - 1) / 2) as isize;
        let f_out = (f_in + 2 * pad as usize - kf) / spec.stride.0 + 1;
        let t_out = x.rows().div_ceil(spec.stride.1);
        let mut y = Matrix::zeros(t_out, f_out * spec.filters);
        for k in 0..t_out {
            for fo in 0..f_out {
                for co in 0..spec.filters {
                    let mut acc = p.bias[co];
                    for j in 0..kt {
                        for i in 0..kf {
                            for ci in 0..c {
                                let t = (k * spec.stride.1 + j) as isize - (kt as isize - 1);
                                let f = (fo * spec.stride.0 + i) as isize - pad;
                                if t < 0 || t as usize >= x.rows() || f < 0 || f as usize >= f_in {
                                    continue;
                                }
                                let w = p.weight[(co, (j * kf + i) * c + ci)];
                                acc += w * x[(t as usize, f as usize * c + ci)];
                            }
                        }
                    }
                    y[(k, fo * spec.filters + co)] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let spec = Conv2dSpec::new(1, (1, 1), 1, (1, 1));
        let p = Conv2dParams {
            weight: Matrix::filled(1, 1, 1.0),
            bias: vec![0.0],
        };
        let x = Matrix::uniform(5, 6, 1.0, &mut rng(0));
        assert_eq!(conv2d(&x, &spec, &p).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_zero_output_and_gradient() {
        let spec = Conv2dSpec::new(2, (3, 3), 2, (1, 1));
        let p = Conv2dParams::<f64>::zeros(&spec);
        let x = Matrix::uniform(6, 8, 1.0, &mut rng(1));
        let y = conv2d(&x, &spec, &p).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        let (dx, _) = conv2d_backward(&x, &spec, &p, &Matrix::filled(y.rows(), y.cols(), 1.0)).unwrap();
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_loops() {
        let mut r = rng(2);
        for spec in [
            Conv2dSpec::new(3, (3, 3), 1, (1, 1)),
            Conv2dSpec::new(2, (5, 3), 2, (2, 2)),
            Conv2dSpec::new(2, (4, 2), 3, (2, 1)),
        ] {
            let x = Matrix::uniform(8, 8 * spec.in_channels, 1.0, &mut r);
            let mut p = Conv2dParams::<f64>::init(&spec, &mut r);
            p.bias = (0..spec.filters).map(|i| i as f64 * 0.1).collect();
            let got = conv2d(&x, &spec, &p).unwrap();
            assert!(got.max_abs_diff(&naive(&x, &spec, &p)) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let spec = Conv2dSpec::new(1, (3, 3), 2, (1, 1));
        let x = Matrix::<f64>::zeros(4, 5);
        assert!(matches!(conv2d(&x, &spec, &Conv2dParams::zeros(&spec)), Err(LayerError::Shape(_))));
    }

    #[test]
    fn time_causality() {
        let spec = Conv2dSpec::new(2, (3, 4), 1, (1, 2));
        let mut r = rng(3);
        let p = Conv2dParams::<f64>::init(&spec, &mut r);
        let x = Matrix::uniform(12, 5, 1.0, &mut r);
        let base = conv2d(&x, &spec, &p).unwrap();
        for t in 0..12 {
            let mut y = x.clone();
            y[(t, 2)] += 1.0;
            let pert = conv2d(&y, &spec, &p).unwrap();
            for k in 0..base.rows() {
                if t > k * spec.stride.1 {
                    assert_eq!(base.row(k), pert.row(k), "frame {k} saw input {t}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = Conv2dSpec::new(2, (3, 3), 2, (2, 2));
        let mut r = rng(4);
        let x = Matrix::uniform(5, 10, 1.0, &mut r);
        let p = Conv2dParams::<f64>::init(&spec, &mut r);
        let y = conv2d(&x, &spec, &p).unwrap();
        let w = Matrix::uniform(y.rows(), y.cols(), 1.0, &mut r);
        let loss = |x: &Matrix<f64>, p: &Conv2dParams<f64>| {
            let y = conv2d(x, &spec, p).unwrap();
            y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (dx, dp) = conv2d_backward(&x, &spec, &p, &w).unwrap();
        let num = numeric_grad(x.as_slice(), |v| loss(&Matrix::from_vec(5, 10, v.to_vec()), &p));
        assert_grads_close(dx.as_slice(), &num, 1e-4, "dx");
        let num = numeric_grad(p.weight.as_slice(), |v| {
            let mut q = p.clone();
            q.weight.as_mut_slice().copy_from_slice(v);
            loss(&x, &q)
        });
        assert_grads_close(dp.weight.as_slice(), &num, 1e-4, "dW");
        let num = numeric_grad(&p.bias, |v| {
            let mut q = p.clone();
            q.bias.copy_from_slice(v);
            loss(&x, &q)
        });
        assert_grads_close(&dp.bias, &num, 1e-4, "db");
    }
}
