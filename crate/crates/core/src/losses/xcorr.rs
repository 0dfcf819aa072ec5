use super::{Alignment, LossError};
use crate::alphabet::BLANK;

#[derive(Clone, Debug, PartialEq)]
pub struct XCorr {
    pub lags: Vec<isize>,
    pub values: Vec<f64>,
    pub peak_lag: isize,
}

pub fn nonblank_indicator(a: &Alignment) -> Vec<f64> {
    a.frames.iter().map(|&k| if k == BLANK { 0.0 } else { 1.0 }).collect()
}

/// Normalized cross-correlation `c(k) = Σ_t a(t)·b(t+k) / √(Σa²·Σb²)` of the
/// non-blank indicators. A positive peak lag means `b` trails `a`. Peak ties
/// go to the smallest `|k|`, then to the negative lag.
pub fn alignment_xcorr(a: &Alignment, b: &Alignment, max_lag: usize) -> Result<XCorr, LossError> {
    if a.len() != b.len() {
        return Err(LossError::AlignmentMismatch {
            got: b.len(),
            expected: a.len(),
        });
    }
    let (xa, xb) = (nonblank_indicator(a), nonblank_indicator(b));
    let na: f64 = xa.iter().map(|v| v * v).sum();
    let nb: f64 = xb.iter().map(|v| v * v).sum();
    if na == 0.0 {
        return Err(LossError::EmptyAlignment("first alignment"));
    }
    if nb == 0.0 {
        return Err(LossError::EmptyAlignment("second alignment"));
    }
    let norm = (na * nb).sqrt();
    let n = xa.len() as isize;
    let m = max_lag as isize;
    let lags: Vec<isize> = (-m..=m).collect();
    let values: Vec<f64> = lags
        .iter()
        .map(|&k| {
            let mut s = 0.0;
            for t in 0..n {
                let u = t + k;
                if (0..n).contains(&u) {
                    s += xa[t as usize] * xb[u as usize];
                }
            }
            s / norm
        })
        .collect();
    let mut peak = 0;
    for i in 0..lags.len() {
        let better = values[i] > values[peak]
            || (values[i] == values[peak]
                && (lags[i].abs() < lags[peak].abs() || (lags[i].abs() == lags[peak].abs() && lags[i] < lags[peak])));
        if better {
            peak = i;
        }
    }
    Ok(XCorr {
        peak_lag: lags[peak],
        lags,
        values,
    })
}

/// Delays an alignment by `frames` (positive) or advances it (negative),
/// padding with blanks and keeping the length.
pub fn shift_alignment(a: &Alignment, frames: isize) -> Alignment {
    let n = a.len() as isize;
    Alignment::new(
        (0..n)
            .map(|t| {
                let s = t - frames;
                if (0..n).contains(&s) {
                    a.frames[s as usize]
                } else {
                    BLANK
                }
            })
            .collect(),
    )
}
