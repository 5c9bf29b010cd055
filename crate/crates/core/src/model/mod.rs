//! The BiLSTM-CNN-Char tagger.
//!
//! Each token is represented by `[word vector ∥ casing embedding ∥ char-CNN
//! vector]`. A forward and a backward LSTM run over the sentence; each
//! direction has its own linear decoder, their logits are summed and a single
//! log-softmax gives per-tag log-probabilities. Decoding is greedy, followed
//! by BIO repair.
//!
//! Word vectors come from an external [`EmbeddingStore`] and are never
//! trained; everything else is a parameter.

mod io;

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, LstmVars, Real, Tape, Var};
use crate::corpus::{repair_bio, Dataset, Sentence, OUTSIDE};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::features::{case_of, CaseCategory, CharVocab};
use crate::rng;

pub use io::{load_model, save_model, FORMAT_VERSION, MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub word_dim: usize,
    pub char_emb_dim: usize,
    pub cnn_filters: usize,
    pub cnn_kernel: usize,
    pub case_emb_dim: usize,
    pub lstm_state: usize,
    pub dropout: f64,
    pub tags: Vec<String>,
    pub char_vocab: CharVocab,
}

impl TaggerConfig {
    pub const CHAR_EMB_DIM: usize = 25;
    pub const CNN_FILTERS: usize = 25;
    pub const CNN_KERNEL: usize = 3;
    pub const CASE_EMB_DIM: usize = 5;
    pub const LSTM_STATE: usize = 200;
    pub const DROPOUT: f64 = 0.5;

    pub fn new(word_dim: usize, tags: Vec<String>, char_vocab: CharVocab) -> Self {
        TaggerConfig {
            word_dim,
            char_emb_dim: Self::CHAR_EMB_DIM,
            cnn_filters: Self::CNN_FILTERS,
            cnn_kernel: Self::CNN_KERNEL,
            case_emb_dim: Self::CASE_EMB_DIM,
            lstm_state: Self::LSTM_STATE,
            dropout: Self::DROPOUT,
            tags,
            char_vocab,
        }
    }

    /// Config for `data` with a tag list covering every entity type in BIO.
    pub fn for_dataset(data: &Dataset, store: &EmbeddingStore) -> Result<Self> {
        Ok(Self::new(store.dim(), bio_tag_list(data), CharVocab::build(data)?))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("char_emb_dim", self.char_emb_dim),
            ("cnn_filters", self.cnn_filters),
            ("cnn_kernel", self.cnn_kernel),
            ("case_emb_dim", self.case_emb_dim),
            ("lstm_state", self.lstm_state),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.tags.iter().any(|t| t == OUTSIDE) {
            return Err(Error::Config("tag list must contain O".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.word_dim + self.case_emb_dim + self.cnn_filters
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    /// Parameter names and in-memory shapes, in file order.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, (usize, usize))> {
        let s = self.lstm_state;
        let k = self.num_tags();
        let d = self.input_dim();
        vec![
            ("char_embeddings", (self.char_vocab.size(), self.char_emb_dim)),
            ("char_cnn.filters", (self.cnn_kernel * self.char_emb_dim, self.cnn_filters)),
            ("char_cnn.bias", (1, self.cnn_filters)),
            ("case_embeddings", (CaseCategory::COUNT, self.case_emb_dim)),
            ("lstm_fwd.w_input", (d, 4 * s)),
            ("lstm_fwd.w_hidden", (s, 4 * s)),
            ("lstm_fwd.bias", (1, 4 * s)),
            ("lstm_bwd.w_input", (d, 4 * s)),
            ("lstm_bwd.w_hidden", (s, 4 * s)),
            ("lstm_bwd.bias", (1, 4 * s)),
            ("decode_fwd.weight", (s, k)),
            ("decode_fwd.bias", (1, k)),
            ("decode_bwd.weight", (s, k)),
            ("decode_bwd.bias", (1, k)),
        ]
    }

    /// Shape of each tensor as recorded in the model file: convolution
    /// filters as `[kernel, char_dim, filters]`, biases as rank 1.
    pub fn file_dims(&self) -> Vec<Vec<usize>> {
        self.parameter_shapes()
            .into_iter()
            .map(|(name, (r, c))| match name {
                "char_cnn.filters" => vec![self.cnn_kernel, self.char_emb_dim, self.cnn_filters],
                n if n.ends_with("bias") => vec![c],
                _ => vec![r, c],
            })
            .collect()
    }
}

/// `O` followed by `B-X`, `I-X` for every entity type, types sorted.
pub fn bio_tag_list(data: &Dataset) -> Vec<String> {
    let mut tags = vec![OUTSIDE.to_string()];
    for t in data.entity_types() {
        tags.push(format!("B-{t}"));
        tags.push(format!("I-{t}"));
    }
    tags
}

// parameter slots, in the order of `parameter_shapes`
const CHAR_EMB: usize = 0;
const CNN_FILTERS: usize = 1;
const CNN_BIAS: usize = 2;
const CASE_EMB: usize = 3;
const FWD: usize = 4;
const BWD: usize = 7;
const DEC_FWD_W: usize = 10;
const DEC_FWD_B: usize = 11;
const DEC_BWD_W: usize = 12;
const DEC_BWD_B: usize = 13;
const LSTM_BIAS_OFFSET: usize = 2;

#[derive(Debug, Clone)]
pub struct TaggerModel<F: Real = f32> {
    config: TaggerConfig,
    seed: u64,
    params: Vec<Array2<F>>,
    tag_index: HashMap<String, usize>,
}

impl<F: Real> PartialEq for TaggerModel<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.seed == other.seed && self.params == other.params
    }
}

/// Output of [`TaggerModel::forward`].
pub struct Forward {
    /// `(T·B) × K` log-probabilities, row `t·B + b`.
    pub log_probs: Var,
    /// Tape handles of the parameters, in model order.
    pub params: Vec<Var>,
    pub batch: usize,
    pub steps: usize,
}

impl<F: Real> TaggerModel<F> {
    /// Glorot-uniform matrices, zero biases, LSTM forget-gate bias 1.
    pub fn init(config: TaggerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::INIT);
        let s = config.lstm_state;
        let params = config
            .parameter_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (_, (rows, cols)))| {
                if rows == 1 {
                    let mut bias = Array2::zeros((1, cols));
                    if i == FWD + LSTM_BIAS_OFFSET || i == BWD + LSTM_BIAS_OFFSET {
                        bias.slice_mut(ndarray::s![.., s..2 * s]).fill(F::one());
                    }
                    bias
                } else {
                    let limit = (6.0 / (rows + cols) as f64).sqrt();
                    Array2::from_shape_simple_fn((rows, cols), || {
                        // sampled in f32 so every precision starts from the same values
                        let v = rng.random_range(-limit..limit) as f32;
                        F::from_f32(v).expect("f32 converts")
                    })
                }
            })
            .collect();
        Ok(Self::from_parts(config, seed, params))
    }

    fn from_parts(config: TaggerConfig, seed: u64, params: Vec<Array2<F>>) -> Self {
        let tag_index = config.tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TaggerModel {
            config,
            seed,
            params,
            tag_index,
        }
    }

    /// Same parameters with a different training dropout rate.
    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        self.config.dropout = rate;
        self.config.validate()?;
        Ok(self)
    }

    pub fn config(&self) -> &TaggerConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tags(&self) -> &[String] {
        &self.config.tags
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tag_index.get(tag).copied()
    }

    pub fn params(&self) -> &[Array2<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config
            .parameter_shapes()
            .into_iter()
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Array2::len).sum()
    }

    /// Same model in another precision.
    pub fn cast<G: Real>(&self) -> TaggerModel<G> {
        let params = self
            .params
            .iter()
            .map(|p| p.mapv(|v| G::from_f64_lossy(v.to_f64().expect("finite"))))
            .collect();
        TaggerModel::from_parts(self.config.clone(), self.seed, params)
    }

    /// Tags of `data` missing from this model's tag list, sorted.
    pub fn unknown_tags(&self, data: &Dataset) -> Vec<String> {
        data.tag_set()
            .iter()
            .filter(|t| !self.tag_index.contains_key(*t))
            .cloned()
            .collect()
    }

    /// Records the network for a batch of sentences on `tape`.
    ///
    /// Sentences are padded to the longest one, or to `min_steps` if larger.
    /// Dropout is applied to the token features and to both LSTM outputs when
    /// `training` is set.
    pub fn forward<S: AsRef<str>, R: Rng + ?Sized>(
        &self,
        tape: &Tape<F>,
        batch: &[Vec<S>],
        store: &EmbeddingStore,
        training: bool,
        rng: &mut R,
        min_steps: usize,
    ) -> Result<Forward> {
        if batch.is_empty() || batch.iter().any(Vec::is_empty) {
            return Err(Error::Empty("forward needs non-empty sentences".into()));
        }
        if store.dim() != self.config.word_dim {
            return Err(Error::Dimension(format!(
                "model expects {}-d word vectors, store `{}` has {}",
                self.config.word_dim,
                store.name(),
                store.dim()
            )));
        }
        let cfg = &self.config;
        let b_size = batch.len();
        let steps = batch.iter().map(Vec::len).max().unwrap_or(0).max(min_steps);
        let rows = steps * b_size;

        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();

        let mut words = Array2::<F>::zeros((rows, cfg.word_dim));
        let mut cases = Vec::with_capacity(rows);
        let mut char_ids: Vec<Option<usize>> = Vec::new();
        let mut segments = Vec::new();
        let mut token_row = vec![None; rows];
        let mut masks = vec![vec![false; b_size]; steps];
        let mut n_tokens = 0;
        for (t, step_mask) in masks.iter_mut().enumerate() {
            for (b, sentence) in batch.iter().enumerate() {
                let r = t * b_size + b;
                let Some(surface) = sentence.get(t).map(AsRef::as_ref) else {
                    cases.push(Some(CaseCategory::Pad.index()));
                    continue;
                };
                step_mask[b] = true;
                for (dst, &src) in words.row_mut(r).iter_mut().zip(store.lookup(surface).vector) {
                    *dst = F::from_f32(src).expect("f32 converts");
                }
                cases.push(Some(case_of(surface).index()));
                let encoded = cfg.char_vocab.encode(surface, cfg.cnn_kernel);
                segments.push((char_ids.len(), encoded.len()));
                char_ids.extend(encoded.into_iter().map(Some));
                token_row[r] = Some(n_tokens);
                n_tokens += 1;
            }
        }

        let word_var = tape.constant(words);
        let case_var = tape.gather_rows(params[CASE_EMB], &cases)?;
        let chars = tape.gather_rows(params[CHAR_EMB], &char_ids)?;
        let char_feats = tape.conv1d_maxpool(chars, &segments, params[CNN_FILTERS], params[CNN_BIAS], cfg.cnn_kernel)?;
        let char_var = tape.gather_rows(char_feats, &token_row)?;
        let features = tape.concat_cols(&[word_var, case_var, char_var])?;
        let features = tape.dropout(features, cfg.dropout, training, rng)?;

        let lstm = |base: usize| LstmVars {
            w_input: params[base],
            w_hidden: params[base + 1],
            bias: params[base + LSTM_BIAS_OFFSET],
        };
        let (hf, hb) = tape.bilstm(features, b_size, &masks, &lstm(FWD), &lstm(BWD))?;
        let hf = tape.dropout(hf, cfg.dropout, training, rng)?;
        let hb = tape.dropout(hb, cfg.dropout, training, rng)?;
        let logits_f = tape.affine(hf, params[DEC_FWD_W], params[DEC_FWD_B])?;
        let logits_b = tape.affine(hb, params[DEC_BWD_W], params[DEC_BWD_B])?;
        let logits = tape.add(logits_f, logits_b)?;
        Ok(Forward {
            log_probs: tape.log_softmax(logits),
            params,
            batch: b_size,
            steps,
        })
    }

    /// Per-token log-probabilities (`T × K`) for one sentence.
    pub fn forward_scores<S: AsRef<str>, R: Rng + ?Sized>(
        &self,
        sentence: &[S],
        store: &EmbeddingStore,
        training: bool,
        rng: &mut R,
    ) -> Result<Array2<F>> {
        let tape = Tape::new();
        let batch = vec![sentence.iter().map(AsRef::as_ref).collect::<Vec<&str>>()];
        let out = self.forward(&tape, &batch, store, training, rng, 0)?;
        Ok((*tape.value(out.log_probs)).clone())
    }

    /// Mean NLL over the real tokens of `sentences`, recorded on `tape`.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        tape: &Tape<F>,
        sentences: &[&Sentence],
        store: &EmbeddingStore,
        training: bool,
        rng: &mut R,
        min_steps: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let words: Vec<Vec<&str>> = sentences.iter().map(|s| s.surfaces().collect()).collect();
        let out = self.forward(tape, &words, store, training, rng, min_steps)?;
        let rows = out.steps * out.batch;
        let mut gold = vec![0usize; rows];
        let mut mask = vec![false; rows];
        let mut unknown = Vec::new();
        for (b, sentence) in sentences.iter().enumerate() {
            for (t, token) in sentence.tokens.iter().enumerate() {
                let r = t * out.batch + b;
                match self.tag_id(&token.tag) {
                    Some(id) => gold[r] = id,
                    None => unknown.push(token.tag.clone()),
                }
                mask[r] = true;
            }
        }
        if !unknown.is_empty() {
            unknown.sort();
            unknown.dedup();
            return Err(Error::UnknownTags(unknown));
        }
        let loss = tape.masked_nll(out.log_probs, &gold, &mask)?;
        Ok((loss, out.params))
    }

    /// Loss value and one gradient per parameter tensor.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        sentences: &[&Sentence],
        store: &EmbeddingStore,
        training: bool,
        rng: &mut R,
        min_steps: usize,
    ) -> Result<(f64, Vec<Array2<F>>)> {
        let tape = Tape::new();
        let (loss, params) = self.batch_loss(&tape, sentences, store, training, rng, min_steps)?;
        let value = tape.value(loss)[[0, 0]].to_f64().unwrap_or(f64::NAN);
        let mut grads = tape.backward(loss)?;
        let grads = params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take_or_zeros(v, p.dim()))
            .collect();
        Ok((value, grads))
    }

    /// Greedy tags for a batch of sentences, repaired to valid BIO.
    pub fn predict_batch<S: AsRef<str>>(&self, batch: &[Vec<S>], store: &EmbeddingStore) -> Result<Vec<Vec<String>>> {
        let tape = Tape::new();
        // inference draws no random numbers
        let mut rng = rng::stream(self.seed, rng::DROPOUT);
        let out = self.forward(&tape, batch, store, false, &mut rng, 0)?;
        let scores = tape.value(out.log_probs);
        Ok(batch
            .iter()
            .enumerate()
            .map(|(b, sentence)| {
                let rows: Vec<usize> = (0..sentence.len()).map(|t| t * out.batch + b).collect();
                let picked = scores.select(ndarray::Axis(0), &rows);
                decode_greedy(picked.view(), &self.config.tags)
            })
            .collect())
    }

    pub fn predict_tags<S: AsRef<str>>(&self, sentence: &[S], store: &EmbeddingStore) -> Result<Vec<String>> {
        let batch = vec![sentence.iter().map(AsRef::as_ref).collect::<Vec<&str>>()];
        Ok(self.predict_batch(&batch, store)?.remove(0))
    }

    /// Predictions for every sentence of `data`, in order, `batch_size` at a time.
    pub fn predict_dataset(&self, data: &Dataset, store: &EmbeddingStore, batch_size: usize) -> Result<Vec<Vec<String>>> {
        let words: Vec<Vec<&str>> = data.sentences().iter().map(|s| s.surfaces().collect()).collect();
        let mut out = Vec::with_capacity(words.len());
        for chunk in words.chunks(batch_size.max(1)) {
            out.extend(self.predict_batch(chunk, store)?);
        }
        Ok(out)
    }
}

/// Argmax per row (lowest index wins ties), then BIO repair.
pub fn decode_greedy<F: Real>(scores: ArrayView2<F>, tags: &[String]) -> Vec<String> {
    let raw: Vec<&str> = scores
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            tags[best].as_str()
        })
        .collect();
    repair_bio(&raw)
}

/// Finite-difference check of the full tagger on a toy configuration:
/// 5-d word vectors, LSTM state 4, tags `O, B-X, I-X`, one 3-token sentence,
/// 64-bit arithmetic, dropout off.
pub fn toy_grad_check(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let sentence = Sentence::from_pairs(&["Aspirin", "mRNA", "12"], &["B-X", "I-X", "O"]);
    let data = Dataset::new(vec![sentence.clone()], crate::corpus::TagScheme::Bio);
    let mut vec_rng = rng::stream(seed, "toy-vectors");
    let store = EmbeddingStore::from_pairs(
        "toy",
        ["aspirin", "mrna", "12"]
            .into_iter()
            .map(|w| (w, (0..5).map(|_| vec_rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>())),
    )?;
    let mut config = TaggerConfig::for_dataset(&data, &store)?;
    config.lstm_state = 4;
    let model: TaggerModel<f64> = TaggerModel::<f32>::init(config, seed)?.cast();
    let names = model.param_names();
    let mut params = model.params().to_vec();
    let mut scratch = model.clone();
    let mut no_dropout = rng::stream(seed, rng::DROPOUT);
    let loss = |p: &[Array2<f64>], want: bool| {
        scratch.params_mut().clone_from_slice(p);
        if want {
            let (l, g) = scratch
                .loss_and_grads(&[&sentence], &store, false, &mut no_dropout, 0)
                .expect("toy loss");
            (l, Some(g))
        } else {
            let tape = Tape::new();
            let (l, _) = scratch
                .batch_loss(&tape, &[&sentence], &store, false, &mut no_dropout, 0)
                .expect("toy loss");
            let value = tape.value(l)[[0, 0]];
            (value, None)
        }
    };
    let config = GradCheckConfig {
        tolerance,
        seed,
        ..GradCheckConfig::default()
    };
    Ok(grad_check(&names, &mut params, loss, &config))
}
