use std::collections::BTreeMap;
use std::path::Path;

use super::DecoderError;
use crate::alphabet::Alphabet;

/// Sentence boundary symbol: pads the left context and closes each line.
pub const LM_BOUNDARY: char = '\u{2402}';
pub const DEFAULT_LM_ORDER: usize = 5;
pub const DEFAULT_LM_K: f64 = 0.01;

const HEADER_TAG: &str = "#charlm";

/// Add-k smoothed character n-gram model over a fixed vocabulary
/// (alphabet, space, boundary). Only full `order − 1` contexts are counted;
/// an unseen context therefore yields the uniform distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct CharLm {
    order: usize,
    k: f64,
    alphabet: Alphabet,
    vocab: Vec<char>,
    counts: BTreeMap<String, BTreeMap<char, u64>>,
    totals: BTreeMap<String, u64>,
}

fn vocabulary(alphabet: &Alphabet) -> Result<Vec<char>, DecoderError> {
    if alphabet.index_of(LM_BOUNDARY).is_some() {
        return Err(DecoderError::UnknownChar(LM_BOUNDARY));
    }
    let mut v = alphabet.chars().to_vec();
    if !v.contains(&' ') {
        v.push(' ');
    }
    v.push(LM_BOUNDARY);
    Ok(v)
}

fn check_params(order: usize, k: f64) -> Result<(), DecoderError> {
    if order < 1 {
        return Err(DecoderError::InvalidOrder(order));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(DecoderError::InvalidSmoothing(k));
    }
    Ok(())
}

pub fn train_char_lm<S: AsRef<str>>(
    corpus: &[S],
    alphabet: &Alphabet,
    order: usize,
    k: f64,
) -> Result<CharLm, DecoderError> {
    check_params(order, k)?;
    if corpus.is_empty() {
        return Err(DecoderError::EmptyCorpus);
    }
    let mut lm = CharLm {
        order,
        k,
        alphabet: alphabet.clone(),
        vocab: vocabulary(alphabet)?,
        counts: BTreeMap::new(),
        totals: BTreeMap::new(),
    };
    for line in corpus {
        let mut seq: Vec<char> = vec![LM_BOUNDARY; order - 1];
        for c in line.as_ref().chars() {
            if c == LM_BOUNDARY || !lm.vocab.contains(&c) {
                return Err(DecoderError::UnknownChar(c));
            }
            seq.push(c);
        }
        seq.push(LM_BOUNDARY);
        for w in seq.windows(order) {
            let ctx: String = w[..order - 1].iter().collect();
            lm.add(ctx, w[order - 1], 1);
        }
    }
    Ok(lm)
}

impl CharLm {
    fn add(&mut self, ctx: String, c: char, n: u64) {
        *self.counts.entry(ctx.clone()).or_default().entry(c).or_default() += n;
        *self.totals.entry(ctx).or_default() += n;
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn vocab(&self) -> &[char] {
        &self.vocab
    }

    /// `order − 1` trailing characters of `history`, boundary-padded.
    pub fn context_of(&self, history: &[char]) -> String {
        let n = self.order - 1;
        let pad = n.saturating_sub(history.len());
        std::iter::repeat_n(LM_BOUNDARY, pad)
            .chain(history[history.len() - (n - pad)..].iter().copied())
            .collect()
    }

    pub fn prob(&self, context: &str, c: char) -> f64 {
        let v = self.vocab.len() as f64;
        let total = self.totals.get(context).copied().unwrap_or(0) as f64;
        let count = self.counts.get(context).and_then(|m| m.get(&c)).copied().unwrap_or(0) as f64;
        (count + self.k) / (total + self.k * v)
    }

    /// ln p(c | last `order − 1` characters of `history`).
    pub fn log_prob_next(&self, history: &[char], c: char) -> f64 {
        self.prob(&self.context_of(history), c).ln()
    }

    /// Sum of per-character log-probabilities of `text` (no end symbol).
    pub fn score_prefix(&self, text: &str) -> f64 {
        let chars: Vec<char> = text.chars().collect();
        (0..chars.len()).map(|i| self.log_prob_next(&chars[..i], chars[i])).sum()
    }

    /// Header line, then sorted `context<TAB>char<TAB>count` lines.
    pub fn to_text(&self) -> String {
        let alpha: String = self.alphabet.clone().into();
        let mut s = format!("{HEADER_TAG}\t{}\t{}\t{alpha}\n", self.order, self.k);
        for (ctx, m) in &self.counts {
            for (c, n) in m {
                s.push_str(&format!("{ctx}\t{c}\t{n}\n"));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, DecoderError> {
        let bad = |line: usize, reason: &str| DecoderError::Format {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let h: Vec<&str> = header.splitn(4, '\t').collect();
        if h.len() != 4 || h[0] != HEADER_TAG {
            return Err(bad(1, "bad header"));
        }
        let order: usize = h[1].parse().map_err(|_| bad(1, "bad order"))?;
        let k: f64 = h[2].parse().map_err(|_| bad(1, "bad smoothing constant"))?;
        check_params(order, k)?;
        let alphabet: Alphabet = h[3].parse().map_err(|e| bad(1, &format!("bad alphabet: {e}")))?;
        let mut lm = CharLm {
            order,
            k,
            vocab: vocabulary(&alphabet)?,
            alphabet,
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
        };
        for (i, line) in lines.enumerate() {
            let no = i + 2;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(no, "expected three tab-separated fields"));
            }
            let ctx = f[0].to_string();
            if ctx.chars().count() != order - 1 || ctx.chars().any(|c| !lm.vocab.contains(&c)) {
                return Err(bad(no, "context has the wrong length or unknown characters"));
            }
            let mut cs = f[1].chars();
            let c = match (cs.next(), cs.next()) {
                (Some(c), None) if lm.vocab.contains(&c) => c,
                _ => return Err(bad(no, "next field must be one vocabulary character")),
            };
            let n: u64 = f[2].parse().map_err(|_| bad(no, "bad count"))?;
            lm.add(ctx, c, n);
        }
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<(), DecoderError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, DecoderError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
