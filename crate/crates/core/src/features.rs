//! Per-token orthographic features: casing category and character indices.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaseCategory {
    AllCaps,
    UpperInitial,
    Lowercase,
    MixedCaps,
    NoInfo,
    /// Only used for padded positions.
    Pad,
}

impl CaseCategory {
    /// Number of rows in the casing embedding (five categories plus padding).
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        match self {
            CaseCategory::AllCaps => 0,
            CaseCategory::UpperInitial => 1,
            CaseCategory::Lowercase => 2,
            CaseCategory::MixedCaps => 3,
            CaseCategory::NoInfo => 4,
            CaseCategory::Pad => 5,
        }
    }
}

/// Classifies a token by the case of its alphabetic characters.
///
/// Precedence: no letters → `NoInfo`, all upper → `AllCaps`, all lower →
/// `Lowercase`, leading upper then lower → `UpperInitial`, else `MixedCaps`.
/// "Leading" means the first character of the token, not the first letter.
pub fn case_of(surface: &str) -> CaseCategory {
    let mut letters = 0usize;
    let mut upper = 0usize;
    let mut upper_after_first = false;
    for (i, c) in surface.chars().enumerate() {
        if !c.is_alphabetic() {
            continue;
        }
        letters += 1;
        if c.is_uppercase() {
            upper += 1;
            if i > 0 {
                upper_after_first = true;
            }
        }
    }
    let first_upper = surface.chars().next().is_some_and(char::is_uppercase);
    if letters == 0 {
        CaseCategory::NoInfo
    } else if upper == letters {
        CaseCategory::AllCaps
    } else if upper == 0 {
        CaseCategory::Lowercase
    } else if first_upper && !upper_after_first {
        CaseCategory::UpperInitial
    } else {
        CaseCategory::MixedCaps
    }
}

/// Character index table; 0 is padding, 1 is unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub const PAD: usize = 0;
    pub const UNKNOWN: usize = 1;

    /// Indices are assigned from 2 in order of first occurrence.
    pub fn build(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("cannot build a character vocabulary from no sentences".into()));
        }
        Ok(Self::from_chars(
            data.sentences().iter().flat_map(|s| s.surfaces()).flat_map(str::chars),
        ))
    }

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut vocab = CharVocab {
            chars: Vec::new(),
            index: HashMap::new(),
        };
        for c in chars {
            if !vocab.index.contains_key(&c) {
                vocab.index.insert(c, vocab.chars.len() + 2);
                vocab.chars.push(c);
            }
        }
        vocab
    }

    /// Total index range, including the two reserved slots.
    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn get(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(Self::UNKNOWN)
    }

    /// Character indices right-padded with [`Self::PAD`] to at least `min_len`.
    pub fn encode(&self, surface: &str, min_len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = surface.chars().map(|c| self.get(c)).collect();
        if out.len() < min_len {
            out.resize(min_len, Self::PAD);
        }
        out
    }
}

impl From<String> for CharVocab {
    fn from(s: String) -> Self {
        CharVocab::from_chars(s.chars())
    }
}

impl From<CharVocab> for String {
    fn from(v: CharVocab) -> Self {
        v.chars.into_iter().collect()
    }
}

pub fn encode_chars(surface: &str, vocab: &CharVocab, min_len: usize) -> Vec<usize> {
    vocab.encode(surface, min_len)
}
