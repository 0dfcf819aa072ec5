use super::{Alignment, LossError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// CE / CTC weights for joint training.
pub const DEFAULT_JOINT_WEIGHTS: (f64, f64) = (0.5, 0.5);
/// CE / CTC / GramCTC weights for the three-way mix.
pub const MIX1_WEIGHTS: (f64, f64, f64) = (0.33, 0.33, 0.33);

/// Mean over frames of `−log p_t(a_t)`.
pub fn ce_alignment_loss<T: Scalar>(
    log_probs: &Matrix<T>,
    alignment: &Alignment,
) -> Result<(T, Matrix<T>), LossError> {
    let n = log_probs.rows();
    if alignment.len() != n {
        return Err(LossError::AlignmentMismatch {
            got: alignment.len(),
            expected: n,
        });
    }
    if let Some(&k) = alignment.frames.iter().find(|&&k| k >= log_probs.cols()) {
        return Err(LossError::WidthMismatch {
            got: log_probs.cols(),
            expected: k + 1,
        });
    }
    let mut grad = log_probs.zeros_like();
    if n == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::from_count(n);
    let mut loss = T::zero();
    for (t, &k) in alignment.frames.iter().enumerate() {
        loss -= log_probs[(t, k)];
        grad[(t, k)] = -inv;
    }
    Ok((loss * inv, grad))
}

/// Output head a loss term applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Char,
    Gram,
}

#[derive(Clone, Debug)]
pub struct LossTerm<T> {
    pub head: Head,
    pub weight: f64,
    pub loss: T,
    pub grad: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointLoss<T> {
    pub loss: T,
    pub char_grad: Option<Matrix<T>>,
    pub gram_grad: Option<Matrix<T>>,
}

/// Weighted sum of losses; gradients are summed per head.
pub fn joint_loss<T: Scalar>(terms: &[LossTerm<T>]) -> Result<JointLoss<T>, LossError> {
    if terms.iter().any(|t| !(t.weight >= 0.0) || !t.weight.is_finite()) {
        return Err(LossError::InvalidWeights("weights must be finite and non-negative".into()));
    }
    if !terms.iter().any(|t| t.weight > 0.0) {
        return Err(LossError::InvalidWeights("at least one weight must be positive".into()));
    }
    let mut out = JointLoss {
        loss: T::zero(),
        char_grad: None,
        gram_grad: None,
    };
    for term in terms {
        let w = T::lit(term.weight);
        out.loss += w * term.loss;
        let slot = match term.head {
            Head::Char => &mut out.char_grad,
            Head::Gram => &mut out.gram_grad,
        };
        match slot {
            Some(g) => {
                if g.shape() != term.grad.shape() {
                    return Err(LossError::WidthMismatch {
                        got: term.grad.cols(),
                        expected: g.cols(),
                    });
                }
                for (a, &b) in g.as_mut_slice().iter_mut().zip(term.grad.as_slice()) {
                    *a += w * b;
                }
            }
            None => {
                let mut g = term.grad.clone();
                g.scale(w);
                *slot = Some(g);
            }
        }
    }
    Ok(out)
}
