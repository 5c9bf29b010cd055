//! Pretrained word vectors in the word2vec/GloVe text layout, plus token
//! coverage reports.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

/// Frozen map from surface form to a fixed-dimension vector.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    name: String,
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
    zeros: Vec<f32>,
}

/// Result of [`EmbeddingStore::lookup`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup<'a> {
    pub vector: &'a [f32],
    pub found: bool,
}

impl EmbeddingStore {
    /// Builds a store from `(word, vector)` pairs. Duplicate words keep their
    /// first vector.
    pub fn from_pairs<I, S>(name: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut store = EmbeddingStore {
            name: name.into(),
            dim: 0,
            index: HashMap::new(),
            vectors: Vec::new(),
            zeros: Vec::new(),
        };
        for (i, (word, vector)) in pairs.into_iter().enumerate() {
            if store.dim == 0 {
                if vector.is_empty() {
                    return Err(Error::Dimension("embedding vectors must be non-empty".into()));
                }
                store.dim = vector.len();
            }
            if vector.len() != store.dim {
                return Err(Error::Dimension(format!(
                    "vector {i} has {} components, expected {}",
                    vector.len(),
                    store.dim
                )));
            }
            store.insert(word.into(), &vector);
        }
        store.finish()
    }

    fn insert(&mut self, word: String, vector: &[f32]) {
        let next = self.index.len();
        if let std::collections::hash_map::Entry::Vacant(slot) = self.index.entry(word) {
            slot.insert(next);
            self.vectors.extend_from_slice(vector);
        }
    }

    fn finish(mut self) -> Result<Self> {
        if self.index.is_empty() {
            return Err(Error::Empty(format!("embedding store `{}` has no vectors", self.name)));
        }
        self.zeros = vec![0.0; self.dim];
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Exact match, then lowercase match, then the zero vector.
    pub fn lookup(&self, surface: &str) -> Lookup<'_> {
        let hit = self.index.get(surface).or_else(|| {
            let lower = surface.to_lowercase();
            if lower == surface {
                None
            } else {
                self.index.get(&lower)
            }
        });
        match hit {
            Some(&row) => Lookup {
                vector: &self.vectors[row * self.dim..(row + 1) * self.dim],
                found: true,
            },
            None => Lookup {
                vector: &self.zeros,
                found: false,
            },
        }
    }

    /// SHA-256 over the word list and vector bits, in insertion order.
    pub fn checksum(&self) -> [u8; 32] {
        let mut words: Vec<(&String, &usize)> = self.index.iter().collect();
        words.sort_by_key(|(_, &row)| row);
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        for (word, _) in words {
            hasher.update(word.as_bytes());
            hasher.update([0u8]);
        }
        for v in &self.vectors {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Loads `<word> <v1> ... <vd>` lines. A first line made of exactly two
/// integers is treated as a `<count> <dim>` header.
pub fn load_text_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "embeddings".into());
    parse_text_embeddings(&text, name, path)
}

pub fn parse_text_embeddings(text: &str, name: impl Into<String>, origin: &Path) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore {
        name: name.into(),
        dim: 0,
        index: HashMap::new(),
        vectors: Vec::new(),
        zeros: Vec::new(),
    };
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut buf: Vec<f32> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split([' ', '\t']).filter(|f| !f.is_empty());
        let Some(word) = fields.next() else { continue };
        buf.clear();
        for field in fields {
            let v: f32 = field
                .parse()
                .map_err(|_| parse_err(lineno, format!("cannot parse `{field}` as a number")))?;
            buf.push(v);
        }
        if i == 0 && buf.len() == 1 && word.parse::<u64>().is_ok() && buf[0].fract() == 0.0 {
            continue;
        }
        if buf.is_empty() {
            return Err(parse_err(lineno, format!("word `{word}` has no vector")));
        }
        if store.dim == 0 {
            store.dim = buf.len();
        } else if buf.len() != store.dim {
            return Err(Error::Dimension(format!(
                "{}:{lineno}: expected {} components, found {}",
                origin.display(),
                store.dim,
                buf.len()
            )));
        }
        store.insert(word.to_string(), &buf);
    }
    store.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub dataset_name: String,
    pub split_name: String,
    pub covered_tokens: usize,
    pub total_tokens: usize,
    pub ratio: f64,
}

impl CoverageReport {
    pub const CSV_HEADER: &'static str = "dataset,split,covered,total,ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6}",
            self.dataset_name, self.split_name, self.covered_tokens, self.total_tokens, self.ratio
        )
    }
}

/// Fraction of token occurrences that resolve through [`EmbeddingStore::lookup`].
pub fn coverage_report(
    store: &EmbeddingStore,
    data: &Dataset,
    dataset_name: &str,
    split_name: &str,
) -> Result<CoverageReport> {
    let mut covered = 0usize;
    let mut total = 0usize;
    for surface in data.sentences().iter().flat_map(|s| s.surfaces()) {
        total += 1;
        if store.lookup(surface).found {
            covered += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty(format!("{dataset_name}/{split_name} has no tokens")));
    }
    Ok(CoverageReport {
        dataset_name: dataset_name.to_string(),
        split_name: split_name.to_string(),
        covered_tokens: covered,
        total_tokens: total,
        ratio: covered as f64 / total as f64,
    })
}
