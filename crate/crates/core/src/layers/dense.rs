use rand::Rng;

use crate::params::{named, NamedTensor, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{affine_backward, Matrix};

/// Fully connected layer, `y = W x + b` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::uniform(outputs, inputs, 1.0 / (inputs as f64).sqrt(), rng),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }
}

impl<T: Scalar> ParamSet<T> for DenseParams<T> {
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

pub fn fully_connected<T: Scalar>(x: &Matrix<T>, p: &DenseParams<T>) -> Matrix<T> {
    x.affine(&p.weight, &p.bias)
}

/// Returns `(dX, dParams)`.
pub fn fully_connected_backward<T: Scalar>(
    x: &Matrix<T>,
    p: &DenseParams<T>,
    grad_out: &Matrix<T>,
) -> (Matrix<T>, DenseParams<T>) {
    let mut g = DenseParams::zeros(p.inputs(), p.outputs());
    let dx = affine_backward(x, &p.weight, grad_out, &mut g.weight, &mut g.bias);
    (dx, g)
}

pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Matrix<T>, grad_out: &Matrix<T>) -> Matrix<T> {
    let mut g = grad_out.clone();
    for (gv, &yv) in g.as_mut_slice().iter_mut().zip(y.as_slice()) {
        if yv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// Row-wise softmax, max-subtracted.
pub fn softmax<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    log_softmax(x).map(|v| v.exp())
}

pub fn log_softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = x.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + s.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub fn log_softmax<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.zeros_like();
    for t in 0..x.rows() {
        log_softmax_row(x.row(t), out.row_mut(t));
    }
    out
}

/// Gradient w.r.t. logits given `log_probs = log_softmax(logits)`.
pub fn log_softmax_backward<T: Scalar>(log_probs: &Matrix<T>, grad_out: &Matrix<T>) -> Matrix<T> {
    let mut g = grad_out.clone();
    for t in 0..g.rows() {
        let total: T = grad_out.row(t).iter().copied().sum();
        for (gv, &lp) in g.row_mut(t).iter_mut().zip(log_probs.row(t)) {
            *gv -= lp.exp() * total;
        }
    }
    g
}

/// Gradient w.r.t. logits given `probs = softmax(logits)`.
pub fn softmax_backward<T: Scalar>(probs: &Matrix<T>, grad_out: &Matrix<T>) -> Matrix<T> {
    let mut g = grad_out.zeros_like();
    for t in 0..g.rows() {
        let p = probs.row(t);
        let go = grad_out.row(t);
        let inner: T = p.iter().zip(go).map(|(&a, &b)| a * b).sum();
        for (k, gv) in g.row_mut(t).iter_mut().enumerate() {
            *gv = p[k] * (go[k] - inner);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grads_close, numeric_grad, rng};

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let p = softmax(&Matrix::<f64>::filled(2, 5, 3.0));
        assert!(p.as_slice().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = Matrix::<f64>::uniform(3, 4, 2.0, &mut rng(0));
        let shifted = x.map(|v| v + 7.5);
        assert!(softmax(&x).max_abs_diff(&softmax(&shifted)) < 1e-14);
        assert!(softmax(&x.map(|v| v * 400.0)).all_finite());
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut r = rng(1);
        let x = Matrix::<f64>::uniform(2, 4, 2.0, &mut r);
        let w = Matrix::<f64>::uniform(2, 4, 1.0, &mut r);
        let f = |v: &[f64]| {
            let p = softmax(&Matrix::from_vec(2, 4, v.to_vec()));
            p.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = softmax_backward(&softmax(&x), &w);
        assert_grads_close(g.as_slice(), &numeric_grad(x.as_slice(), f), 1e-4, "softmax");
        let f = |v: &[f64]| {
            let p = log_softmax(&Matrix::from_vec(2, 4, v.to_vec()));
            p.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = log_softmax_backward(&log_softmax(&x), &w);
        assert_grads_close(g.as_slice(), &numeric_grad(x.as_slice(), f), 1e-4, "log_softmax");
    }

    #[test]
    fn fc_gradients_match_finite_differences() {
        let mut r = rng(2);
        let x = Matrix::<f64>::uniform(3, 4, 1.0, &mut r);
        let p = DenseParams::<f64>::init(4, 2, &mut r);
        let w = Matrix::<f64>::uniform(3, 2, 1.0, &mut r);
        let loss = |x: &Matrix<f64>, p: &DenseParams<f64>| {
            relu(&fully_connected(x, p)).as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let y = relu(&fully_connected(&x, &p));
        let (dx, dp) = fully_connected_backward(&x, &p, &relu_backward(&y, &w));
        assert_grads_close(
            dx.as_slice(),
            &numeric_grad(x.as_slice(), |v| loss(&Matrix::from_vec(3, 4, v.to_vec()), &p)),
            1e-4,
            "dx",
        );
        let num = numeric_grad(p.weight.as_slice(), |v| {
            let mut q = p.clone();
            q.weight.as_mut_slice().copy_from_slice(v);
            loss(&x, &q)
        });
        assert_grads_close(dp.weight.as_slice(), &num, 1e-4, "dW");
    }
}
