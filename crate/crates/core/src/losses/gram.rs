use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ctc::collapse;
use super::{Lattice, LossError};
use crate::alphabet::{Alphabet, BLANK};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Ordered gram inventory; gram `i` has output index `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GramSetRepr", into = "GramSetRepr")]
pub struct GramSet {
    alphabet: Alphabet,
    grams: Vec<String>,
    index: HashMap<String, usize>,
    max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct GramSetRepr {
    alphabet: Alphabet,
    grams: Vec<String>,
}

impl TryFrom<GramSetRepr> for GramSet {
    type Error = LossError;
    fn try_from(r: GramSetRepr) -> Result<Self, LossError> {
        GramSet::new(r.alphabet, r.grams)
    }
}

impl From<GramSet> for GramSetRepr {
    fn from(g: GramSet) -> Self {
        GramSetRepr {
            alphabet: g.alphabet,
            grams: g.grams,
        }
    }
}

impl GramSet {
    pub fn new(alphabet: Alphabet, grams: Vec<String>) -> Result<Self, LossError> {
        let mut index = HashMap::with_capacity(grams.len());
        for (i, g) in grams.iter().enumerate() {
            if g.is_empty() {
                return Err(LossError::InvalidGramSet(format!("empty gram at position {}", i + 1)));
            }
            if let Some(c) = g.chars().find(|&c| alphabet.index_of(c).is_none()) {
                return Err(LossError::InvalidGramSet(format!("gram {g:?} uses {c:?} outside the alphabet")));
            }
            if index.insert(g.clone(), i + 1).is_some() {
                return Err(LossError::InvalidGramSet(format!("duplicate gram {g:?}")));
            }
        }
        if let Some(c) = alphabet.chars().iter().find(|c| !index.contains_key(&c.to_string())) {
            return Err(LossError::InvalidGramSet(format!("missing unigram {c:?}")));
        }
        let max_len = grams.iter().map(|g| g.chars().count()).max().unwrap_or(0);
        Ok(Self {
            alphabet,
            grams,
            index,
            max_len,
        })
    }

    /// Unigrams only, in alphabet order (indices coincide with the alphabet's).
    pub fn unigrams(alphabet: Alphabet) -> Self {
        let grams = alphabet.chars().iter().map(|c| c.to_string()).collect();
        Self::new(alphabet, grams).expect("unigram set is valid")
    }

    /// All unigrams plus the most frequent multi-character substrings of
    /// `texts` (length `2..=max_len`, no whitespace) up to `size` grams.
    /// Frequency ties break lexicographically.
    pub fn from_corpus<S: AsRef<str>>(alphabet: Alphabet, texts: &[S], max_len: usize, size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            let chars: Vec<char> = text.as_ref().chars().collect();
            for n in 2..=max_len {
                for w in chars.windows(n) {
                    if w.iter().all(|c| !c.is_whitespace() && alphabet.index_of(*c).is_some()) {
                        *counts.entry(w.iter().collect()).or_default() += 1;
                    }
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut grams: Vec<String> = alphabet.chars().iter().map(|c| c.to_string()).collect();
        let room = size.saturating_sub(grams.len());
        grams.extend(ranked.into_iter().take(room).map(|(g, _)| g));
        Self::new(alphabet, grams).expect("corpus grams are drawn from the alphabet")
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    /// Grams plus blank.
    pub fn output_size(&self) -> usize {
        self.grams.len() + 1
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn grams(&self) -> &[String] {
        &self.grams
    }

    /// Gram text for an output index (`None` for blank or out of range).
    pub fn gram(&self, output_index: usize) -> Option<&str> {
        output_index.checked_sub(1).and_then(|i| self.grams.get(i)).map(String::as_str)
    }

    pub fn index_of(&self, gram: &str) -> Option<usize> {
        self.index.get(gram).copied()
    }

    /// One gram per line in output order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.grams {
            s.push_str(g);
            s.push('\n');
        }
        s
    }

    pub fn parse(alphabet: Alphabet, text: &str) -> Result<Self, LossError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let mut grams = Vec::new();
        for (n, line) in body.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                return Err(LossError::InvalidGramSet(format!("blank line {}", n + 1)));
            }
            grams.push(line.to_string());
        }
        Self::new(alphabet, grams)
    }

    pub fn load(alphabet: Alphabet, path: &Path) -> Result<Self, LossError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LossError::InvalidGramSet(format!("{}: {e}", path.display())))?;
        Self::parse(alphabet, &text)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }
}

/// Lattice state: blank after `i` label characters, or gram `gram` (output
/// index) ending at position `pos`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramState {
    Blank(usize),
    Gram { pos: usize, gram: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GramLattice {
    pub label: Vec<char>,
    pub states: Vec<GramState>,
    pub lattice: Lattice,
}

/// States are ordered by position: `blank₀`, then for each `i` the grams
/// ending at `i` followed by `blankᵢ`. A direct move between two gram states
/// is allowed unless both emit the same gram, which would merge on collapse.
pub fn build_gram_lattice(label: &str, grams: &GramSet) -> Result<GramLattice, LossError> {
    let chars: Vec<char> = label.chars().collect();
    if let Some(&c) = chars.iter().find(|&&c| grams.index_of(&c.to_string()).is_none()) {
        return Err(LossError::UncoverableLabel(c.to_string()));
    }
    let l = chars.len();
    let mut states = vec![GramState::Blank(0)];
    let mut blank_at = vec![0usize; l + 1];
    let mut grams_at: Vec<Vec<usize>> = vec![Vec::new(); l + 1];
    for i in 1..=l {
        for n in 1..=grams.max_len().min(i) {
            let sub: String = chars[i - n..i].iter().collect();
            if let Some(g) = grams.index_of(&sub) {
                grams_at[i].push(states.len());
                states.push(GramState::Gram { pos: i, gram: g });
            }
        }
        blank_at[i] = states.len();
        states.push(GramState::Blank(i));
    }
    let gram_len = |g: usize| grams.gram(g).map_or(0, |s| s.chars().count());
    let mut emit = Vec::with_capacity(states.len());
    let mut preds = Vec::with_capacity(states.len());
    let mut initial = vec![0];
    for (s, st) in states.iter().enumerate() {
        match *st {
            GramState::Blank(i) => {
                emit.push(BLANK);
                preds.push(grams_at[i].clone());
            }
            GramState::Gram { pos, gram } => {
                emit.push(gram);
                let j = pos - gram_len(gram);
                let mut p = vec![blank_at[j]];
                for &q in &grams_at[j] {
                    if let GramState::Gram { gram: h, .. } = states[q] {
                        if h != gram {
                            p.push(q);
                        }
                    }
                }
                if j == 0 {
                    initial.push(s);
                }
                preds.push(p);
            }
        }
    }
    let mut finals = vec![blank_at[l]];
    finals.extend(&grams_at[l]);
    let mut lattice = Lattice {
        emit,
        preds,
        initial,
        finals,
        min_frames: 0,
    };
    lattice.min_frames = shortest_path(&lattice);
    Ok(GramLattice {
        label: chars,
        states,
        lattice,
    })
}

/// States are topologically ordered, so one pass suffices.
fn shortest_path(l: &Lattice) -> usize {
    let mut d = vec![usize::MAX; l.states()];
    for s in 0..l.states() {
        if l.initial.contains(&s) {
            d[s] = 1;
        }
        for &p in &l.preds[s] {
            if d[p] != usize::MAX {
                d[s] = d[s].min(d[p] + 1);
            }
        }
    }
    l.finals.iter().map(|&s| d[s]).min().unwrap_or(usize::MAX)
}

/// Negative log-likelihood summed over every decomposition of the label
/// into grams and every alignment of each decomposition.
pub fn gramctc_loss<T: Scalar>(
    log_probs: &Matrix<T>,
    lattice: &GramLattice,
) -> Result<(T, Matrix<T>), LossError> {
    lattice.lattice.nll(log_probs)
}

/// Collapses a gram-index frame sequence and concatenates the grams.
pub fn gram_greedy_collapse(frames: &[usize], grams: &GramSet) -> String {
    collapse(frames).into_iter().filter_map(|k| grams.gram(k)).collect()
}
