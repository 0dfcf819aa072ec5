use serde::{Deserialize, Serialize};

use super::{Lattice, LossError};
use crate::alphabet::BLANK;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Per-frame emission indices of one path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub frames: Vec<usize>,
}

impl Alignment {
    pub fn new(frames: Vec<usize>) -> Self {
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Merges repeats, then drops blanks.
    pub fn collapse(&self) -> Vec<usize> {
        collapse(&self.frames)
    }
}

/// Merges repeats, then drops blanks.
pub fn collapse(frames: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &k in frames {
        if k != prev && k != BLANK {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// `|l|` plus one separating blank per adjacent repeat.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Blank-interleaved graph: states `blank, l₁, blank, l₂, …, blank`.
pub fn ctc_lattice(label: &[usize]) -> Result<Lattice, LossError> {
    if label.contains(&BLANK) {
        return Err(LossError::InvalidLabel("label contains the blank index".into()));
    }
    let s_n = 2 * label.len() + 1;
    let mut emit = Vec::with_capacity(s_n);
    let mut preds = Vec::with_capacity(s_n);
    for s in 0..s_n {
        if s % 2 == 0 {
            emit.push(BLANK);
            preds.push(if s == 0 { vec![] } else { vec![s - 1] });
        } else {
            let k = label[s / 2];
            emit.push(k);
            let mut p = vec![s - 1];
            if s >= 3 && label[s / 2 - 1] != k {
                p.push(s - 2);
            }
            preds.push(p);
        }
    }
    let mut initial = vec![0];
    let mut finals = vec![s_n - 1];
    if !label.is_empty() {
        initial.push(1);
        finals.push(s_n - 2);
    }
    Ok(Lattice {
        emit,
        preds,
        initial,
        finals,
        min_frames: min_frames(label),
    })
}

/// Negative log-likelihood of `label` and its gradient w.r.t. `log_probs`.
pub fn ctc_loss<T: Scalar>(log_probs: &Matrix<T>, label: &[usize]) -> Result<(T, Matrix<T>), LossError> {
    ctc_lattice(label)?.nll(log_probs)
}

/// Most probable CTC path. Ties prefer staying, then the nearer
/// predecessor; at the end the trailing blank wins a tie.
pub fn viterbi_align<T: Scalar>(log_probs: &Matrix<T>, label: &[usize]) -> Result<Alignment, LossError> {
    let lattice = ctc_lattice(label)?;
    let (path, _) = lattice.viterbi(log_probs)?;
    Ok(Alignment::new(path.into_iter().map(|s| lattice.emit[s]).collect()))
}
