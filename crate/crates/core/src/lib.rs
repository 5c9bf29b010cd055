//! Neural named-entity tagger: a BiLSTM over word, casing and character-CNN
//! features, decoded per direction and greedily, trained with Adam on a
//! small tape-based reverse-mode engine.
//!
//! Module map:
//!
//! - [`corpus`]: CoNLL reading, BIO/BIOES validation, conversion and span extraction
//! - [`embeddings`]: pretrained word vectors and coverage reports
//! - [`features`]: casing categories and character encodings
//! - [`autodiff`]: the tape, layer ops, Adam and the finite-difference checker
//! - [`model`]: the tagger itself plus its binary file format
//! - [`training`]: mini-batch training, LR decay, validation split, random search
//! - [`evaluation`]: entity-level micro precision/recall/F1
//! - [`cli`]: the `ner-forge` command line

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
