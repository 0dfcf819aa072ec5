use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Output index reserved for the CTC blank.
pub const BLANK: usize = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlphabetError {
    #[error("duplicate character {0:?} in alphabet")]
    Duplicate(char),
    #[error("character {0:?} is reserved")]
    Reserved(char),
    #[error("character {0:?} is not in the alphabet")]
    Unknown(char),
    #[error("alphabet is empty")]
    Empty,
}

/// Ordered character set. Character `i` has output index `i + 1`; index 0
/// is the blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Alphabet {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self, AlphabetError> {
        let mut out: Vec<char> = Vec::new();
        for c in chars {
            if c == '\t' || c == '\n' || c == '\r' {
                return Err(AlphabetError::Reserved(c));
            }
            if out.contains(&c) {
                return Err(AlphabetError::Duplicate(c));
            }
            out.push(c);
        }
        if out.is_empty() {
            return Err(AlphabetError::Empty);
        }
        Ok(Self { chars: out })
    }

    /// Number of characters, excluding the blank.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Output width including the blank.
    pub fn output_size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    /// Character for output index `idx` (`None` for blank or out of range).
    pub fn symbol(&self, idx: usize) -> Option<char> {
        idx.checked_sub(1).and_then(|i| self.chars.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, AlphabetError> {
        text.chars()
            .map(|c| self.index_of(c).ok_or(AlphabetError::Unknown(c)))
            .collect()
    }

    /// Maps indices to characters, skipping blanks and unknown indices.
    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().filter_map(|&i| self.symbol(i)).collect()
    }

    pub fn contains_str(&self, text: &str) -> bool {
        text.chars().all(|c| self.index_of(c).is_some())
    }
}

impl TryFrom<String> for Alphabet {
    type Error = AlphabetError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Alphabet::new(s.chars())
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.chars.into_iter().collect()
    }
}

impl std::str::FromStr for Alphabet {
    type Err = AlphabetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Alphabet::new(s.chars())
    }
}
