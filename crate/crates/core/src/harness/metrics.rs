use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Levenshtein distance with unit costs, two-row DP.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Character edits over reference length plus the raw counts.
pub fn char_errors(reference: &str, hyp: &str) -> (usize, usize) {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hyp.chars().collect();
    (edit_distance(&r, &h), r.len())
}

pub fn word_errors(reference: &str, hyp: &str) -> (usize, usize) {
    let r = words(reference);
    (edit_distance(&r, &words(hyp)), r.len())
}

fn ratio((e, n): (usize, usize)) -> Result<f64, HarnessError> {
    if n == 0 {
        return Err(HarnessError::UndefinedRate);
    }
    Ok(e as f64 / n as f64)
}

pub fn cer(reference: &str, hyp: &str) -> Result<f64, HarnessError> {
    ratio(char_errors(reference, hyp))
}

pub fn wer(reference: &str, hyp: &str) -> Result<f64, HarnessError> {
    ratio(word_errors(reference, hyp))
}

/// Corpus-level rates: total edits over total reference length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cer: f64,
    pub wer: f64,
    pub utterances: usize,
    pub slices: BTreeMap<String, SliceMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub cer: f64,
    pub wer: f64,
    pub utterances: usize,
}

#[derive(Default)]
struct Tally {
    ce: usize,
    cn: usize,
    we: usize,
    wn: usize,
    n: usize,
}

impl Tally {
    fn add(&mut self, r: &str, h: &str) {
        let (ce, cn) = char_errors(r, h);
        let (we, wn) = word_errors(r, h);
        self.ce += ce;
        self.cn += cn;
        self.we += we;
        self.wn += wn;
        self.n += 1;
    }

    fn rates(&self) -> (f64, f64) {
        let f = |e: usize, n: usize| if n == 0 { 0.0 } else { e as f64 / n as f64 };
        (f(self.ce, self.cn), f(self.we, self.wn))
    }
}

/// Scores `(reference, hypothesis, slice key)` triples. Errors if every
/// reference is empty.
pub fn score_corpus<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a str, Option<&'a str>)>,
) -> Result<MetricsReport, HarnessError> {
    let mut all = Tally::default();
    let mut slices: BTreeMap<String, Tally> = BTreeMap::new();
    for (r, h, key) in items {
        all.add(r, h);
        if let Some(k) = key {
            slices.entry(k.to_string()).or_default().add(r, h);
        }
    }
    if all.cn == 0 {
        return Err(HarnessError::UndefinedRate);
    }
    let (cer, wer) = all.rates();
    Ok(MetricsReport {
        cer,
        wer,
        utterances: all.n,
        slices: slices
            .into_iter()
            .map(|(k, t)| {
                let (cer, wer) = t.rates();
                (k, SliceMetrics { cer, wer, utterances: t.n })
            })
            .collect(),
    })
}
