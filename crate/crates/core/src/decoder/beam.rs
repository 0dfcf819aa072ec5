use std::cmp::Ordering;
use std::collections::HashMap;

use super::{CharLm, DecoderError};
use crate::alphabet::{Alphabet, BLANK};
use crate::losses::ctc_loss;
use crate::scalar::{log_add, Scalar};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// LM weight.
    pub alpha: f64,
    /// Per-character insertion bonus.
    pub beta: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 16,
            alpha: 0.5,
            beta: 0.0,
        }
    }
}

/// One surviving prefix. `score = ln(p_blank + p_nonblank) + α·lm + β·|prefix|`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Output indices (no blanks).
    pub prefix: Vec<usize>,
    pub text: String,
    pub log_p_blank: f64,
    pub log_p_nonblank: f64,
    pub lm_log_prob: f64,
    pub score: f64,
}

impl BeamHypothesis {
    pub fn log_p_ctc(&self) -> f64 {
        log_add(self.log_p_blank, self.log_p_nonblank)
    }
}

#[derive(Clone, Copy)]
struct Mass {
    blank: f64,
    nonblank: f64,
    lm: f64,
}

impl Mass {
    fn total(&self) -> f64 {
        log_add(self.blank, self.nonblank)
    }
}

fn score(m: &Mass, len: usize, cfg: &BeamConfig) -> f64 {
    m.total() + cfg.alpha * m.lm + cfg.beta * len as f64
}

// Descending score, then lexicographically smaller prefix.
fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// CTC prefix beam search with exact blank/non-blank prefix merging.
/// Returns the final beam, best first.
pub fn beam_search<T: Scalar>(
    log_probs: &Matrix<T>,
    alphabet: &Alphabet,
    lm: Option<&CharLm>,
    cfg: &BeamConfig,
) -> Result<Vec<BeamHypothesis>, DecoderError> {
    if cfg.beam_width == 0 {
        return Err(DecoderError::InvalidBeam);
    }
    let ninf = f64::NEG_INFINITY;
    let v = log_probs.cols();
    let spell = |p: &[usize]| -> Vec<char> { p.iter().filter_map(|&k| alphabet.symbol(k)).collect() };
    let lm_step = |p: &[usize], k: usize| -> f64 {
        match (lm, alphabet.symbol(k)) {
            (Some(lm), Some(c)) => lm.log_prob_next(&spell(p), c),
            _ => 0.0,
        }
    };
    let mut beam: Vec<(Vec<usize>, Mass)> = vec![(
        Vec::new(),
        Mass {
            blank: 0.0,
            nonblank: ninf,
            lm: 0.0,
        },
    )];
    for row in log_probs.iter_rows() {
        let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        let mut next: HashMap<Vec<usize>, Mass> = HashMap::new();
        for (prefix, m) in &beam {
            let total = m.total();
            // Blank keeps the prefix.
            let e = next.entry(prefix.clone()).or_insert(Mass {
                blank: ninf,
                nonblank: ninf,
                lm: m.lm,
            });
            e.blank = log_add(e.blank, total + row[BLANK]);
            // Repeating the last symbol without a blank keeps the prefix.
            if let Some(&last) = prefix.last() {
                e.nonblank = log_add(e.nonblank, m.nonblank + row[last]);
            }
            for (k, &lp) in row.iter().enumerate().take(v).skip(1) {
                let from = if prefix.last() == Some(&k) { m.blank } else { total };
                let mut ext = prefix.clone();
                ext.push(k);
                let lm_ext = m.lm + if cfg.alpha != 0.0 { lm_step(prefix, k) } else { 0.0 };
                let e = next.entry(ext).or_insert(Mass {
                    blank: ninf,
                    nonblank: ninf,
                    lm: lm_ext,
                });
                e.nonblank = log_add(e.nonblank, from + lp);
            }
        }
        let mut ranked: Vec<(Vec<usize>, f64)> =
            next.iter()
                .filter(|(_, m)| m.total() > ninf)
                .map(|(p, m)| (p.clone(), score(m, p.len(), cfg)))
                .collect();
        ranked.sort_by(rank);
        ranked.truncate(cfg.beam_width);
        beam = ranked
            .into_iter()
            .map(|(p, _)| {
                let m = next[&p];
                (p, m)
            })
            .collect();
    }
    Ok(beam
        .into_iter()
        .map(|(prefix, m)| BeamHypothesis {
            text: spell(&prefix).into_iter().collect(),
            score: score(&m, prefix.len(), cfg),
            log_p_blank: m.blank,
            log_p_nonblank: m.nonblank,
            lm_log_prob: m.lm,
            prefix,
        })
        .collect())
}

/// Best prefix of [`beam_search`] as text.
pub fn beam_search_decode<T: Scalar>(
    log_probs: &Matrix<T>,
    alphabet: &Alphabet,
    lm: Option<&CharLm>,
    cfg: &BeamConfig,
) -> Result<String, DecoderError> {
    let beam = beam_search(log_probs, alphabet, lm, cfg)?;
    Ok(beam.into_iter().next().map(|h| h.text).unwrap_or_default())
}

/// Combined score of an arbitrary prefix, with its exact CTC mass.
/// `−∞` when the prefix cannot be emitted in `T` frames.
pub fn prefix_score<T: Scalar>(
    log_probs: &Matrix<T>,
    prefix: &[usize],
    alphabet: &Alphabet,
    lm: Option<&CharLm>,
    cfg: &BeamConfig,
) -> f64 {
    let lp = match ctc_loss(log_probs, prefix) {
        Ok((nll, _)) => -nll.as_f64(),
        Err(_) => return f64::NEG_INFINITY,
    };
    let text: String = prefix.iter().filter_map(|&k| alphabet.symbol(k)).collect();
    let lm_lp = match lm {
        Some(lm) if cfg.alpha != 0.0 => lm.score_prefix(&text),
        _ => 0.0,
    };
    lp + cfg.alpha * lm_lp + cfg.beta * prefix.len() as f64
}
