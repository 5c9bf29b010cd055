//! A small generated corpus with two entity types, for smoke tests and the
//! overfit sanity run.
//!
//! Chemicals are single capitalised drug names; diseases are two lowercase
//! tokens (`<organ> <condition>`). Everything else is lowercase filler, so the
//! pattern is learnable from word identity and casing alone.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::{Dataset, Sentence, TagScheme};
use crate::embeddings::EmbeddingStore;
use crate::error::Result;
use crate::rng;

pub const CHEMICALS: [&str; 8] = [
    "Aspirin", "Cisplatin", "Tamoxifen", "Warfarin", "Heparin", "Morphine", "Lithium", "Ibuprofen",
];
pub const ORGANS: [&str; 6] = ["renal", "hepatic", "cardiac", "pulmonary", "breast", "colon"];
pub const CONDITIONS: [&str; 4] = ["failure", "cancer", "injury", "fibrosis"];
pub const FILLERS: [&str; 10] = [
    "the", "patient", "received", "developed", "after", "with", "treatment", "was", "and", "given",
];

const TEMPLATES: [&[Slot]; 5] = [
    &[Slot::Word("the"), Slot::Word("patient"), Slot::Word("received"), Slot::Chemical, Slot::Word("and"), Slot::Word("developed"), Slot::Disease],
    &[Slot::Chemical, Slot::Word("was"), Slot::Word("given"), Slot::Word("after"), Slot::Disease],
    &[Slot::Disease, Slot::Word("developed"), Slot::Word("after"), Slot::Word("treatment"), Slot::Word("with"), Slot::Chemical],
    &[Slot::Word("treatment"), Slot::Word("with"), Slot::Chemical, Slot::Word("and"), Slot::Chemical],
    &[Slot::Word("the"), Slot::Word("patient"), Slot::Word("with"), Slot::Disease, Slot::Word("was"), Slot::Word("given"), Slot::Chemical],
];

#[derive(Clone, Copy)]
enum Slot {
    Word(&'static str),
    Chemical,
    Disease,
}

/// `n` sentences in BIO, drawn deterministically from `seed`.
pub fn corpus(n: usize, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, "synthetic");
    let sentences = (0..n)
        .map(|i| {
            let mut words: Vec<&str> = Vec::new();
            let mut tags: Vec<&str> = Vec::new();
            for slot in TEMPLATES[i % TEMPLATES.len()] {
                match slot {
                    Slot::Word(w) => {
                        words.push(w);
                        tags.push("O");
                    }
                    Slot::Chemical => {
                        words.push(CHEMICALS.choose(&mut rng).expect("non-empty"));
                        tags.push("B-Chemical");
                    }
                    Slot::Disease => {
                        words.push(ORGANS.choose(&mut rng).expect("non-empty"));
                        words.push(CONDITIONS.choose(&mut rng).expect("non-empty"));
                        tags.extend(["B-Disease", "I-Disease"]);
                    }
                }
            }
            Sentence::from_pairs(&words, &tags)
        })
        .collect();
    Dataset::new(sentences, TagScheme::Bio)
}

/// Random `dim`-d vectors for every word the generator can emit, keyed in
/// lowercase.
pub fn embeddings(dim: usize, seed: u64) -> Result<EmbeddingStore> {
    let mut rng = rng::stream(seed, "synthetic-vectors");
    let words: Vec<String> = CHEMICALS
        .iter()
        .chain(&ORGANS)
        .chain(&CONDITIONS)
        .chain(&FILLERS)
        .map(|w| w.to_lowercase())
        .collect();
    let pairs: Vec<(String, Vec<f32>)> = words
        .into_iter()
        .map(|w| {
            let v = (0..dim).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            (w, v)
        })
        .collect();
    EmbeddingStore::from_pairs("synthetic", pairs)
}

/// The store in the whitespace text format read by
/// [`crate::embeddings::load_text_embeddings`].
pub fn embeddings_text(dim: usize, seed: u64) -> Result<String> {
    let store = embeddings(dim, seed)?;
    let mut out = String::new();
    for w in CHEMICALS.iter().chain(&ORGANS).chain(&CONDITIONS).chain(&FILLERS) {
        let w = w.to_lowercase();
        out.push_str(&w);
        for v in store.lookup(&w).vector {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_sequence;
    use std::path::Path;

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let a = corpus(50, 1);
        assert_eq!(a.sentences(), corpus(50, 1).sentences());
        assert_eq!(a.len(), 50);
        assert_eq!(a.entity_types(), ["Chemical", "Disease"]);
        for s in a.sentences() {
            assert!(validate_sequence(&s.tags(), TagScheme::Bio));
        }
    }

    #[test]
    fn every_token_has_a_vector() {
        let data = corpus(50, 3);
        let store = embeddings(16, 3).unwrap();
        assert!(data.sentences().iter().flat_map(|s| s.surfaces()).all(|w| store.lookup(w).found));
    }

    #[test]
    fn text_form_parses_to_the_same_vectors() {
        let store = embeddings(8, 5).unwrap();
        let text = embeddings_text(8, 5).unwrap();
        let parsed = crate::embeddings::parse_text_embeddings(&text, "synthetic", Path::new("x")).unwrap();
        assert_eq!(parsed.checksum(), store.checksum());
    }
}
