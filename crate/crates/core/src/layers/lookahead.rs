use rand::Rng;

use super::LayerError;
use crate::params::{named, NamedTensor, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Row `j − 1` holds the per-feature weights for frame `t + j`, `j = 1..=C`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaConvParams<T> {
    pub weights: Matrix<T>,
}

impl<T: Scalar> LaConvParams<T> {
    pub fn init<R: Rng + ?Sized>(context: usize, features: usize, rng: &mut R) -> Self {
        Self {
            weights: Matrix::uniform(context, features, 1.0 / (context as f64).sqrt(), rng),
        }
    }

    pub fn zeros(context: usize, features: usize) -> Self {
        Self {
            weights: Matrix::zeros(context, features),
        }
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        if self.weights.rows() == 0 {
            return Err(LayerError::InvalidConfig("lookahead context must be at least 1".into()));
        }
        Ok(())
    }

    pub fn context(&self) -> usize {
        self.weights.rows()
    }

    pub fn features(&self) -> usize {
        self.weights.cols()
    }
}

impl<T: Scalar> ParamSet<T> for LaConvParams<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        vec![named(
            "weights",
            &[self.weights.rows(), self.weights.cols()],
            self.weights.as_slice(),
        )]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weights.as_mut_slice()]
    }
}

/// Output for one frame. `future(j)` yields frame `t + j` for `j = 1..=C`,
/// `None` past the end.
#[inline]
pub fn la_conv_frame<'a, T: Scalar>(
    params: &LaConvParams<T>,
    future: impl Fn(usize) -> Option<&'a [T]>,
    out: &mut [T],
) {
    out.fill(T::zero());
    for j in 1..=params.context() {
        let Some(x) = future(j) else { break };
        for ((o, &w), &v) in out.iter_mut().zip(params.weights.row(j - 1)).zip(x) {
            *o += w * v;
        }
    }
}

/// `y(t, h) = Σ_{j=1..C} w_j(h) · x(t + j, h)`; frames past the end are zero.
pub fn la_conv<T: Scalar>(x: &Matrix<T>, params: &LaConvParams<T>) -> Result<Matrix<T>, LayerError> {
    params.validate()?;
    if x.cols() != params.features() {
        return Err(LayerError::Shape(format!(
            "lookahead conv over {} features got width {}",
            params.features(),
            x.cols()
        )));
    }
    let n = x.rows();
    let mut y = x.zeros_like();
    for t in 0..n {
        la_conv_frame(params, |j| (t + j < n).then(|| x.row(t + j)), y.row_mut(t));
    }
    Ok(y)
}

/// Returns `(dX, dParams)`.
pub fn la_conv_backward<T: Scalar>(
    x: &Matrix<T>,
    params: &LaConvParams<T>,
    grad_out: &Matrix<T>,
) -> (Matrix<T>, LaConvParams<T>) {
    let n = x.rows();
    let mut dx = x.zeros_like();
    let mut dp = LaConvParams::zeros(params.context(), params.features());
    for t in 0..n {
        let g = grad_out.row(t);
        for j in 1..=params.context() {
            if t + j >= n {
                break;
            }
            let w = params.weights.row(j - 1);
            let xr = x.row(t + j);
            let dw = dp.weights.row_mut(j - 1);
            for h in 0..g.len() {
                dw[h] += g[h] * xr[h];
            }
            let dxr = dx.row_mut(t + j);
            for h in 0..g.len() {
                dxr[h] += g[h] * w[h];
            }
        }
    }
    (dx, dp)
}
