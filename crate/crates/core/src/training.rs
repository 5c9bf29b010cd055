//! Mini-batch training with Adam, inverse-time LR decay, a held-out
//! validation split and best-epoch selection; plus random hyperparameter
//! search over many such runs.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::AdamState;
use crate::corpus::{Dataset, Sentence};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{TaggerConfig, TaggerModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Decay factor in `lr / (1 + po·epoch)`.
    pub po: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub validation_split: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            po: 0.005,
            batch_size: 8,
            epochs: 15,
            dropout: 0.5,
            validation_split: 0.2,
            seed: 42,
            clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.po >= 0.0 && self.po.is_finite()) {
            return Err(Error::Config(format!("decay {} must be non-negative", self.po)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.validation_split > 0.0 && self.validation_split < 1.0) {
            return Err(Error::Config(format!(
                "validation split {} outside (0, 1)",
                self.validation_split
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::Config(format!("clip {} must be positive", self.clip)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 0-based.
    pub epoch: usize,
    /// Token-weighted mean training loss.
    pub loss: f64,
    /// Entity F1 on the validation split, in [0, 1].
    pub val_f1: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss,val_f1,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{}", self.epoch, self.loss, self.val_f1, self.lr)
    }
}

/// Header plus one row per epoch, newline-terminated.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(EpochMetrics::CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

/// `lr / (1 + po·epoch)`, epoch counted from 0.
pub fn lr_schedule(lr: f64, po: f64, epoch: usize) -> f64 {
    lr / (1.0 + po * epoch as f64)
}

/// Seeded shuffle, then the last `⌈fraction·N⌉` sentences go to validation.
pub fn split_train_validation(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation split {fraction} outside (0, 1)")));
    }
    let n = data.len();
    let n_valid = (fraction * n as f64).ceil() as usize;
    if n_valid == 0 || n_valid >= n {
        return Err(Error::Empty(format!(
            "splitting {n} sentences at {fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SPLIT));
    let pick = |idx: &[usize]| -> Vec<Sentence> { idx.iter().map(|&i| data.sentences()[i].clone()).collect() };
    let (train, valid) = order.split_at(n - n_valid);
    Ok((
        Dataset::new(pick(train), data.scheme()),
        Dataset::new(pick(valid), data.scheme()),
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation F1; the initial model if no epoch ran.
    pub model: TaggerModel<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn best_f1(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.metrics[e].val_f1)
    }
}

/// Trains `model` on `data`, holding out `config.validation_split` of it.
///
/// Each epoch reshuffles the training sentences, takes one Adam step per
/// batch at that epoch's decayed rate, then scores the validation split.
/// `progress` sees every epoch's metrics as they are produced.
pub fn train(
    model: TaggerModel<f32>,
    data: &Dataset,
    store: &EmbeddingStore,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("no training sentences".into()));
    }
    let data = data.to_bio();
    let unknown = model.unknown_tags(&data);
    if !unknown.is_empty() {
        return Err(Error::UnknownTags(unknown));
    }
    let mut model = model.with_dropout(config.dropout)?;
    let (train_set, valid_set) = split_train_validation(&data, config.validation_split, config.seed)?;

    let mut adam = AdamState::new(model.params().iter().map(|p| p.dim()));
    let mut shuffle_rng = rng::stream(config.seed, rng::SHUFFLE);
    let mut dropout_rng = rng::stream(config.seed, rng::DROPOUT);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics: Vec<EpochMetrics> = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, TaggerModel<f32>)> = None;

    for epoch in 0..config.epochs {
        let lr = lr_schedule(config.lr, config.po, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sentence> = chunk.iter().map(|&i| &train_set.sentences()[i]).collect();
            let (loss, grads) = model.loss_and_grads(&batch, store, true, &mut dropout_rng, 0)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, batch {b}")));
            }
            adam.step(model.params_mut(), &grads, lr, config.clip)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {b}")),
                    other => other,
                })?;
            let n: usize = batch.iter().map(|s| s.len()).sum();
            loss_sum += loss * n as f64;
            tokens += n;
        }
        let predicted = model.predict_dataset(&valid_set, store, config.batch_size)?;
        let val_f1 = evaluate(&valid_set, &predicted)?.f1;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / tokens as f64,
            val_f1,
            lr,
        };
        progress(&m);
        let improved = match &best {
            None => true,
            Some((e, _)) => val_f1 > metrics[*e].val_f1,
        };
        metrics.push(m);
        if improved {
            best = Some((epoch, model.clone()));
        }
    }

    Ok(match best {
        Some((epoch, snapshot)) => TrainOutcome {
            model: snapshot,
            metrics,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            model,
            metrics,
            best_epoch: None,
        },
    })
}

/// Ranges sampled by [`random_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub lstm_states: Vec<usize>,
    pub dropout: (f64, f64),
    pub batch_size: (usize, usize),
    /// Sampled log-uniformly.
    pub lr: (f64, f64),
    pub epochs: (usize, usize),
    pub po: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lstm_states: vec![200, 250],
            dropout: (0.3, 0.7),
            batch_size: (4, 256),
            lr: (0.0003, 0.01),
            epochs: (10, 100),
            po: (0.001, 0.01),
        }
    }
}

/// One sampled point of a [`SearchSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub train: TrainConfig,
    pub lstm_state: usize,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.lstm_states.is_empty()
            && !self.lstm_states.contains(&0)
            && self.dropout.0 >= 0.0
            && self.dropout.0 <= self.dropout.1
            && self.dropout.1 < 1.0
            && self.batch_size.0 >= 1
            && self.batch_size.0 <= self.batch_size.1
            && self.lr.0 > 0.0
            && self.lr.0 <= self.lr.1
            && self.epochs.0 <= self.epochs.1
            && self.po.0 >= 0.0
            && self.po.0 <= self.po.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid search space {self:?}")))
        }
    }

    /// Draws one configuration; fields not searched come from `base`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, base: &TrainConfig) -> TrialConfig {
        let lstm_state = self.lstm_states[rng.random_range(0..self.lstm_states.len())];
        let dropout = rng.random_range(self.dropout.0..=self.dropout.1);
        let batch_size = rng.random_range(self.batch_size.0..=self.batch_size.1);
        let lr = (rng.random_range(self.lr.0.ln()..=self.lr.1.ln())).exp().clamp(self.lr.0, self.lr.1);
        let epochs = rng.random_range(self.epochs.0..=self.epochs.1);
        let po = rng.random_range(self.po.0..=self.po.1);
        let seed = rng.random();
        TrialConfig {
            train: TrainConfig {
                lr,
                po,
                batch_size,
                epochs,
                dropout,
                seed,
                ..base.clone()
            },
            lstm_state,
        }
    }
}

#[derive(Debug)]
pub struct TrialResult {
    pub index: usize,
    pub config: TrialConfig,
    pub outcome: Result<TrainOutcome>,
}

impl TrialResult {
    pub fn best_f1(&self) -> Option<f64> {
        self.outcome.as_ref().ok().and_then(TrainOutcome::best_f1)
    }
}

#[derive(Debug)]
pub struct SearchOutcome {
    /// Index into `trials` of the winner.
    pub best: usize,
    pub trials: Vec<TrialResult>,
}

impl SearchOutcome {
    pub fn best_trial(&self) -> &TrialResult {
        &self.trials[self.best]
    }
}

/// Trains `trials` sampled configurations and ranks them by best validation
/// F1, ties going to the earlier trial.
///
/// Configurations are all drawn up front from the `search` stream of `seed`,
/// so results do not depend on `threads`. A failed trial is kept in the
/// results; the search fails only if every trial does.
pub fn random_search(
    space: &SearchSpace,
    trials: usize,
    data: &Dataset,
    store: &EmbeddingStore,
    model_config: &TaggerConfig,
    base: &TrainConfig,
    threads: Option<usize>,
) -> Result<SearchOutcome> {
    if trials == 0 {
        return Err(Error::Config("random search needs at least one trial".into()));
    }
    space.validate()?;
    let mut rng = rng::stream(base.seed, rng::SEARCH);
    let configs: Vec<TrialConfig> = (0..trials).map(|_| space.sample(&mut rng, base)).collect();

    let run = |(index, config): (usize, TrialConfig)| {
        let outcome = TaggerModel::<f32>::init(
            TaggerConfig {
                lstm_state: config.lstm_state,
                ..model_config.clone()
            },
            config.train.seed,
        )
        .and_then(|model| train(model, data, store, &config.train, &mut |_| {}));
        TrialResult { index, config, outcome }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut results: Vec<TrialResult> =
        pool.install(|| configs.into_iter().enumerate().collect::<Vec<_>>().into_par_iter().map(run).collect());
    results.sort_by_key(|r| r.index);

    let mut best: Option<(usize, f64)> = None;
    for r in &results {
        if let Some(f1) = r.best_f1() {
            if best.is_none_or(|(_, b)| f1 > b) {
                best = Some((r.index, f1));
            }
        }
    }
    match best {
        Some((index, _)) => Ok(SearchOutcome { best: index, trials: results }),
        None => {
            let first = results
                .into_iter()
                .find_map(|r| r.outcome.err())
                .map(|e| e.to_string())
                .unwrap_or_else(|| "no trial ran an epoch".into());
            Err(Error::Config(format!("every search trial failed; first error: {first}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use proptest::prelude::*;

    fn tiny_model(data: &Dataset, store: &EmbeddingStore, seed: u64) -> TaggerModel<f32> {
        let mut cfg = TaggerConfig::for_dataset(data, store).unwrap();
        cfg.lstm_state = 16;
        TaggerModel::init(cfg, seed).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0.001, 0.005, 0), 0.001);
        assert!((lr_schedule(0.001, 0.005, 10) - 0.000_952_381).abs() < 1e-9);
        assert!((0..50).all(|e| lr_schedule(0.01, 0.0, e) == 0.01));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data = synthetic::corpus(10, 1);
        let (t, v) = split_train_validation(&data, 0.2, 5).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        let (t2, v2) = split_train_validation(&data, 0.2, 5).unwrap();
        assert_eq!(t.sentences(), t2.sentences());
        assert_eq!(v.sentences(), v2.sentences());
        let (_, v3) = split_train_validation(&data, 0.2, 6).unwrap();
        assert_ne!(v.sentences(), v3.sentences());
    }

    #[test]
    fn split_rejects_empty_sides() {
        let one = synthetic::corpus(1, 1);
        assert!(split_train_validation(&one, 0.5, 0).is_err());
        let data = synthetic::corpus(10, 1);
        assert!(split_train_validation(&data, 0.0, 0).is_err());
        assert!(split_train_validation(&data, 1.0, 0).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = synthetic::corpus(10, 1);
        let store = synthetic::embeddings(8, 1).unwrap();
        let model = tiny_model(&data, &store, 3);
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train(model.clone(), &data, &store, &config, &mut |_| {}).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.best_epoch, None);
        assert_eq!(out.model.params(), model.params());
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic::corpus(20, 2);
        let store = synthetic::embeddings(8, 2).unwrap();
        let config = TrainConfig { epochs: 3, seed: 11, ..TrainConfig::default() };
        let run = || train(tiny_model(&data, &store, 4), &data, &store, &config, &mut |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn metrics_follow_schedule_and_reach_progress_sink() {
        let data = synthetic::corpus(20, 2);
        let store = synthetic::embeddings(8, 2).unwrap();
        let config = TrainConfig { epochs: 4, po: 0.5, ..TrainConfig::default() };
        let mut seen = Vec::new();
        let out = train(tiny_model(&data, &store, 4), &data, &store, &config, &mut |m| seen.push(m.clone())).unwrap();
        assert_eq!(seen, out.metrics);
        for (e, m) in out.metrics.iter().enumerate() {
            assert_eq!(m.epoch, e);
            assert_eq!(m.lr, lr_schedule(config.lr, config.po, e));
        }
        let best = out.best_epoch.unwrap();
        let top = out.metrics.iter().map(|m| m.val_f1).fold(f64::MIN, f64::max);
        assert_eq!(out.metrics[best].val_f1, top);
        assert!(out.metrics[..best].iter().all(|m| m.val_f1 < top));
        assert!(metrics_csv(&out.metrics).starts_with("epoch,loss,val_f1,lr\n0,"));
    }

    #[test]
    fn overfit_loss_falls_for_five_epochs() {
        let data = synthetic::corpus(50, 42);
        let store = synthetic::embeddings(50, 42).unwrap();
        let config = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let model = TaggerModel::init(TaggerConfig::for_dataset(&data, &store).unwrap(), config.seed).unwrap();
        let out = train(model, &data, &store, &config, &mut |_| {}).unwrap();
        let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn unknown_tags_fail_before_training() {
        let data = synthetic::corpus(10, 1);
        let store = synthetic::embeddings(8, 1).unwrap();
        let other = Dataset::new(
            vec![Sentence::from_pairs(&["Aspirin"], &["B-Gene"]), Sentence::from_pairs(&["the"], &["O"])],
            crate::corpus::TagScheme::Bio,
        );
        let model = tiny_model(&data, &store, 1);
        let err = train(model, &other, &store, &TrainConfig::default(), &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::UnknownTags(_)));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let base = TrainConfig::default();
        for bad in [
            TrainConfig { lr: 0.0, ..base.clone() },
            TrainConfig { po: -1.0, ..base.clone() },
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { validation_split: 1.0, ..base.clone() },
            TrainConfig { clip: 0.0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn narrow_space() -> SearchSpace {
        SearchSpace {
            lstm_states: vec![12, 16],
            dropout: (0.0, 0.1),
            batch_size: (4, 8),
            lr: (0.01, 0.02),
            epochs: (2, 3),
            po: (0.001, 0.01),
        }
    }

    #[test]
    fn single_trial_equals_direct_training() {
        let data = synthetic::corpus(20, 3);
        let store = synthetic::embeddings(8, 3).unwrap();
        let model_cfg = TaggerConfig::for_dataset(&data, &store).unwrap();
        let base = TrainConfig::default();
        let out = random_search(&narrow_space(), 1, &data, &store, &model_cfg, &base, Some(1)).unwrap();
        let trial = out.best_trial();
        let sampled = narrow_space().sample(&mut rng::stream(base.seed, rng::SEARCH), &base);
        assert_eq!(trial.config, sampled);
        let model = TaggerModel::init(
            TaggerConfig { lstm_state: sampled.lstm_state, ..model_cfg },
            sampled.train.seed,
        )
        .unwrap();
        let direct = train(model, &data, &store, &sampled.train, &mut |_| {}).unwrap();
        let searched = trial.outcome.as_ref().unwrap();
        assert_eq!(searched.metrics, direct.metrics);
        assert_eq!(searched.model, direct.model);
    }

    #[test]
    fn search_is_independent_of_thread_count() {
        let data = synthetic::corpus(20, 3);
        let store = synthetic::embeddings(8, 3).unwrap();
        let model_cfg = TaggerConfig::for_dataset(&data, &store).unwrap();
        let base = TrainConfig::default();
        let a = random_search(&narrow_space(), 3, &data, &store, &model_cfg, &base, Some(1)).unwrap();
        let b = random_search(&narrow_space(), 3, &data, &store, &model_cfg, &base, Some(3)).unwrap();
        assert_eq!(a.best, b.best);
        for (x, y) in a.trials.iter().zip(&b.trials) {
            assert_eq!(x.config, y.config);
            assert_eq!(x.best_f1(), y.best_f1());
        }
        let top = a.trials.iter().filter_map(TrialResult::best_f1).fold(f64::MIN, f64::max);
        let first_top = a.trials.iter().position(|t| t.best_f1() == Some(top)).unwrap();
        assert_eq!(a.best, first_top);
    }

    #[test]
    fn zero_trials_rejected() {
        let data = synthetic::corpus(10, 3);
        let store = synthetic::embeddings(8, 3).unwrap();
        let model_cfg = TaggerConfig::for_dataset(&data, &store).unwrap();
        let r = random_search(&SearchSpace::default(), 0, &data, &store, &model_cfg, &TrainConfig::default(), None);
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_exact_and_non_increasing(lr in 1e-5f64..1.0, po in 0.0f64..1.0, e in 0usize..500) {
            prop_assert_eq!(lr_schedule(lr, po, e), lr / (1.0 + po * e as f64));
            prop_assert!(lr_schedule(lr, po, e + 1) <= lr_schedule(lr, po, e));
        }

        #[test]
        fn split_partitions_the_data(n in 2usize..40, fraction in 0.05f64..0.95, seed in any::<u64>()) {
            let data = synthetic::corpus(n, 9);
            match split_train_validation(&data, fraction, seed) {
                Ok((t, v)) => {
                    prop_assert_eq!(v.len(), (fraction * n as f64).ceil() as usize);
                    prop_assert_eq!(t.len() + v.len(), n);
                    let mut all: Vec<String> = t.sentences().iter().chain(v.sentences())
                        .map(|s| format!("{:?}", s)).collect();
                    let mut orig: Vec<String> = data.sentences().iter().map(|s| format!("{:?}", s)).collect();
                    all.sort();
                    orig.sort();
                    prop_assert_eq!(all, orig);
                }
                Err(_) => prop_assert!((fraction * n as f64).ceil() as usize >= n),
            }
        }

        #[test]
        fn samples_stay_in_range(seed in any::<u64>()) {
            let space = SearchSpace::default();
            let c = space.sample(&mut rng::stream(seed, rng::SEARCH), &TrainConfig::default());
            prop_assert!(space.lstm_states.contains(&c.lstm_state));
            prop_assert!((0.3..=0.7).contains(&c.train.dropout));
            prop_assert!((4..=256).contains(&c.train.batch_size));
            prop_assert!((0.0003..=0.01).contains(&c.train.lr));
            prop_assert!((10..=100).contains(&c.train.epochs));
            prop_assert!((0.001..=0.01).contains(&c.train.po));
        }
    }
}
