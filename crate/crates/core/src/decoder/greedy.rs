use crate::alphabet::Alphabet;
use crate::losses::{collapse, gram_greedy_collapse, GramSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Per-frame argmax; ties go to the lowest index.
pub fn argmax_path<T: Scalar>(log_probs: &Matrix<T>) -> Vec<usize> {
    log_probs
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn greedy_decode<T: Scalar>(log_probs: &Matrix<T>, alphabet: &Alphabet) -> String {
    alphabet.decode(&collapse(&argmax_path(log_probs)))
}

/// Greedy decoding of a gram head: collapse over gram indices, then spell.
pub fn greedy_decode_grams<T: Scalar>(log_probs: &Matrix<T>, grams: &GramSet) -> String {
    gram_greedy_collapse(&argmax_path(log_probs), grams)
}
