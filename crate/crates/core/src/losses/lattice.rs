use super::LossError;
use crate::scalar::{log_add, Scalar};
use crate::tensor::Matrix;

/// Left-to-right emission graph. Every state has an implicit self-loop;
/// `preds[s]` lists the other states that may precede `s` in preference
/// order for Viterbi tie-breaking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    pub emit: Vec<usize>,
    pub preds: Vec<Vec<usize>>,
    pub initial: Vec<usize>,
    /// Preference order for Viterbi tie-breaking.
    pub finals: Vec<usize>,
    /// Fewest frames on any complete path.
    pub min_frames: usize,
}

impl Lattice {
    pub fn states(&self) -> usize {
        self.emit.len()
    }

    fn check<T: Scalar>(&self, lp: &Matrix<T>) -> Result<(), LossError> {
        if lp.rows() < self.min_frames {
            return Err(LossError::LabelTooLong {
                frames: lp.rows(),
                required: self.min_frames,
            });
        }
        let width = self.emit.iter().copied().max().unwrap_or(0) + 1;
        if lp.cols() < width {
            return Err(LossError::WidthMismatch {
                got: lp.cols(),
                expected: width,
            });
        }
        Ok(())
    }

    /// `alpha[t][s]`: log-probability of frames `0..=t` ending in `s`.
    pub fn forward<T: Scalar>(&self, lp: &Matrix<T>) -> Matrix<T> {
        let s_n = self.states();
        let mut alpha = Matrix::filled(lp.rows(), s_n, T::neg_infinity());
        if lp.rows() == 0 {
            return alpha;
        }
        for &s in &self.initial {
            alpha[(0, s)] = lp[(0, self.emit[s])];
        }
        for t in 1..lp.rows() {
            for s in 0..s_n {
                let mut acc = alpha[(t - 1, s)];
                for &p in &self.preds[s] {
                    acc = log_add(acc, alpha[(t - 1, p)]);
                }
                if acc != T::neg_infinity() {
                    alpha[(t, s)] = acc + lp[(t, self.emit[s])];
                }
            }
        }
        alpha
    }

    /// `beta[t][s]`: log-probability of frames `t+1..` given state `s` at `t`.
    pub fn backward<T: Scalar>(&self, lp: &Matrix<T>) -> Matrix<T> {
        let s_n = self.states();
        let n = lp.rows();
        let mut beta = Matrix::filled(n, s_n, T::neg_infinity());
        if n == 0 {
            return beta;
        }
        let mut succs = vec![Vec::new(); s_n];
        for (s, ps) in self.preds.iter().enumerate() {
            for &p in ps {
                succs[p].push(s);
            }
        }
        for &s in &self.finals {
            beta[(n - 1, s)] = T::zero();
        }
        for t in (0..n - 1).rev() {
            for s in 0..s_n {
                let mut acc = beta[(t + 1, s)] + lp[(t + 1, self.emit[s])];
                for &q in &succs[s] {
                    acc = log_add(acc, beta[(t + 1, q)] + lp[(t + 1, self.emit[q])]);
                }
                beta[(t, s)] = acc;
            }
        }
        beta
    }

    /// Negative log-likelihood over all complete paths and its gradient with
    /// respect to `lp`.
    pub fn nll<T: Scalar>(&self, lp: &Matrix<T>) -> Result<(T, Matrix<T>), LossError> {
        self.check(lp)?;
        let alpha = self.forward(lp);
        let beta = self.backward(lp);
        let n = lp.rows();
        let mut log_z = T::neg_infinity();
        for &s in &self.finals {
            log_z = log_add(log_z, alpha[(n - 1, s)]);
        }
        if log_z == T::neg_infinity() {
            return Err(LossError::LabelTooLong {
                frames: n,
                required: self.min_frames,
            });
        }
        let mut grad = lp.zeros_like();
        for t in 0..n {
            for s in 0..self.states() {
                let occ = alpha[(t, s)] + beta[(t, s)] - log_z;
                if occ != T::neg_infinity() {
                    grad[(t, self.emit[s])] -= occ.exp();
                }
            }
        }
        Ok((-log_z, grad))
    }

    /// Most probable state path and its log-probability.
    pub fn viterbi<T: Scalar>(&self, lp: &Matrix<T>) -> Result<(Vec<usize>, T), LossError> {
        self.check(lp)?;
        let n = lp.rows();
        let s_n = self.states();
        let mut score = Matrix::filled(n, s_n, T::neg_infinity());
        let mut back = vec![usize::MAX; n * s_n];
        if n == 0 {
            return Ok((Vec::new(), T::zero()));
        }
        for &s in &self.initial {
            score[(0, s)] = lp[(0, self.emit[s])];
            back[s] = s;
        }
        for t in 1..n {
            for s in 0..s_n {
                let mut best = score[(t - 1, s)];
                let mut arg = s;
                for &p in &self.preds[s] {
                    if score[(t - 1, p)] > best {
                        best = score[(t - 1, p)];
                        arg = p;
                    }
                }
                if best != T::neg_infinity() {
                    score[(t, s)] = best + lp[(t, self.emit[s])];
                    back[t * s_n + s] = arg;
                }
            }
        }
        let mut end = usize::MAX;
        let mut best = T::neg_infinity();
        for &s in &self.finals {
            if score[(n - 1, s)] > best {
                best = score[(n - 1, s)];
                end = s;
            }
        }
        if end == usize::MAX {
            return Err(LossError::LabelTooLong {
                frames: n,
                required: self.min_frames,
            });
        }
        let mut path = vec![0; n];
        let mut s = end;
        for t in (0..n).rev() {
            path[t] = s;
            s = back[t * s_n + s];
        }
        Ok((path, best))
    }
}
