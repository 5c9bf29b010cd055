//! The `ner-forge` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable or malformed input, unknown tags, dimension mismatch),
//! 3 numeric failure (non-finite loss, failed gradient check).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{format_conll, read_conll, read_tokens, Dataset, TagScheme};
use crate::embeddings::{coverage_report, load_text_embeddings, CoverageReport, EmbeddingStore};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, evaluate_tokens, EvalReport};
use crate::model::{load_model, save_model, toy_grad_check, TaggerConfig, TaggerModel};
use crate::training::{metrics_csv, random_search, train, SearchSpace, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Worker threads for `search`; unset means one per core.
pub const THREADS_ENV: &str = "NER_FORGE_THREADS";

const PREDICT_BATCH: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "ner-forge", version, about = "BiLSTM-CNN-Char named entity tagger")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a tagger and write the model file.
    Train(TrainArgs),
    /// Score a model on a gold CoNLL file (entity-level P/R/F1).
    Eval(EvalArgs),
    /// Tag a CoNLL or one-token-per-line file.
    Predict(PredictArgs),
    /// Report the share of tokens covered by an embedding file.
    Coverage(CoverageArgs),
    /// Finite-difference check of the tagger's gradients on a toy model.
    GradCheck(GradCheckArgs),
    /// Random hyperparameter search.
    Search(SearchArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Training data in CoNLL format.
    #[arg(long)]
    pub train: PathBuf,
    /// Development data, merged into the training data with --merge-dev.
    #[arg(long, requires = "merge_dev")]
    pub dev: Option<PathBuf>,
    #[arg(long, requires = "dev")]
    pub merge_dev: bool,
    /// Word vectors in whitespace-separated text format.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value = "bio")]
    pub scheme: TagScheme,
    #[arg(long, default_value_t = 0.2)]
    pub validation_split: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.005)]
    pub po: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TaggerConfig::LSTM_STATE)]
    pub lstm_state: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value = "bio")]
    pub scheme: TagScheme,
    /// Score individual non-O tokens instead of whole entities.
    #[arg(long)]
    pub token_level: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Tokens in the first column; any other columns are ignored.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Dataset name for the report.
    #[arg(long, default_value = "dataset")]
    pub name: String,
    #[arg(long, default_value = "bio")]
    pub scheme: TagScheme,
    /// Splits as `name=path`, e.g. `train=data/train.tsv`.
    #[arg(required = true, value_parser = parse_split)]
    pub splits: Vec<(String, PathBuf)>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Trial results CSV; defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Where to save the winning model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Override the epoch range, `min:max`.
    #[arg(long, value_parser = parse_range::<usize>)]
    pub epochs_range: Option<(usize, usize)>,
    /// Override the batch size range, `min:max`.
    #[arg(long, value_parser = parse_range::<usize>)]
    pub batch_range: Option<(usize, usize)>,
    /// Override the LSTM state sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lstm_states: Option<Vec<usize>>,
}

fn parse_split(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}

fn parse_range<T: std::str::FromStr>(s: &str) -> std::result::Result<(T, T), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected min:max, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<T>().map_err(|_| format!("bad number `{v}` in `{s}`"));
    Ok((parse(a)?, parse(b)?))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) | Error::Shape(_) => EXIT_NUMERIC,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::InvalidTag { .. }
        | Error::InvalidSequence(_)
        | Error::Empty(_)
        | Error::Dimension(_)
        | Error::Format(_)
        | Error::UnknownTags(_) => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Coverage(a) => cmd_coverage(&a),
        Command::GradCheck(a) => cmd_grad_check(&a),
        Command::Search(a) => cmd_search(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_training_data(args: &DataArgs) -> Result<Dataset> {
    let train = read_conll(&args.train, args.scheme)?;
    let Some(dev_path) = args.dev.as_ref().filter(|_| args.merge_dev) else {
        eprintln!("{}", train.describe(&args.train));
        return Ok(train);
    };
    let dev = read_conll(dev_path, args.scheme)?;
    let merged = train.merge(&dev)?;
    eprintln!(
        "training set: {} sentences ({} train + {} dev)",
        merged.len(),
        train.len(),
        dev.len()
    );
    Ok(merged)
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let config = TrainConfig {
        lr: args.lr,
        po: args.po,
        batch_size: args.batch_size,
        epochs: args.max_epochs,
        dropout: args.dropout,
        validation_split: args.data.validation_split,
        seed: args.data.seed,
        clip: args.data.clip,
    };
    config.validate()?;
    let data = load_training_data(&args.data)?;
    let store = load_text_embeddings(&args.data.embeddings)?;
    let mut model_config = TaggerConfig::for_dataset(&data, &store)?;
    model_config.lstm_state = args.lstm_state;
    model_config.dropout = args.dropout;
    let model = TaggerModel::init(model_config, config.seed)?;
    eprintln!("{} parameters", model.parameter_count());

    let out = train(model, &data, &store, &config, &mut |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val_f1 {:.2}  lr {:.6}",
            m.epoch,
            m.loss,
            100.0 * m.val_f1,
            m.lr
        );
    })?;
    if let Some(e) = out.best_epoch {
        eprintln!("best epoch {e}, validation F1 {:.2}", 100.0 * out.metrics[e].val_f1);
    }
    save_model(&out.model, store.name(), &args.model)?;
    if let Some(path) = &args.metrics {
        std::fs::write(path, metrics_csv(&out.metrics)).map_err(|e| Error::io(path, e))?;
    }
    Ok(EXIT_OK)
}

fn load_model_and_store(model: &Path, embeddings: &Path) -> Result<(TaggerModel<f32>, EmbeddingStore)> {
    let store = load_text_embeddings(embeddings)?;
    let model = load_model(model, &store)?;
    Ok((model, store))
}

fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from(EvalReport::CSV_HEADER);
    out.push('\n');
    for line in report.csv_lines() {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let (model, store) = load_model_and_store(&args.model, &args.embeddings)?;
    let test = read_conll(&args.test, args.scheme)?.to_bio();
    let unknown = model.unknown_tags(&test);
    if !unknown.is_empty() {
        return Err(Error::UnknownTags(unknown));
    }
    let predicted = model.predict_dataset(&test, &store, PREDICT_BATCH)?;
    let report = if args.token_level {
        evaluate_tokens(&test, &predicted)?
    } else {
        evaluate(&test, &predicted)?
    };
    write_text(None, &report_csv(&report))?;
    Ok(EXIT_OK)
}

fn cmd_predict(args: &PredictArgs) -> Result<i32> {
    let (model, store) = load_model_and_store(&args.model, &args.embeddings)?;
    let sentences = read_tokens(&args.input)?;
    let mut tagged = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(PREDICT_BATCH) {
        let tags = model.predict_batch(chunk, &store)?;
        for (words, tags) in chunk.iter().zip(tags) {
            tagged.push(words.iter().cloned().zip(tags).collect::<Vec<_>>());
        }
    }
    write_text(args.output.as_deref(), &format_conll(tagged))?;
    Ok(EXIT_OK)
}

fn cmd_coverage(args: &CoverageArgs) -> Result<i32> {
    let store = load_text_embeddings(&args.embeddings)?;
    let mut out = String::from(CoverageReport::CSV_HEADER);
    out.push('\n');
    for (split, path) in &args.splits {
        let data = read_conll(path, args.scheme)?;
        let report = coverage_report(&store, &data, &args.name, split)?;
        eprintln!("{}/{}: {:.3}% of tokens covered", args.name, split, 100.0 * report.ratio);
        out.push_str(&report.csv_row());
        out.push('\n');
    }
    write_text(None, &out)?;
    Ok(EXIT_OK)
}

fn cmd_grad_check(args: &GradCheckArgs) -> Result<i32> {
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        return Err(Error::Config(format!("tolerance {} must be positive", args.tolerance)));
    }
    let report = toy_grad_check(args.seed, args.tolerance)?;
    let mut out = String::new();
    for t in &report.tensors {
        out.push_str(&format!(
            "{:<20} checked {:>3}  failed {:>3}  max rel error {:.3e}\n",
            t.name, t.checked, t.failed, t.max_rel_error
        ));
    }
    out.push_str(if report.passed() { "PASS\n" } else { "FAIL\n" });
    write_text(None, &out)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_NUMERIC })
}

fn cmd_search(args: &SearchArgs) -> Result<i32> {
    let mut space = SearchSpace::default();
    if let Some(r) = args.epochs_range {
        space.epochs = r;
    }
    if let Some(r) = args.batch_range {
        space.batch_size = r;
    }
    if let Some(s) = &args.lstm_states {
        space.lstm_states = s.clone();
    }
    let base = TrainConfig {
        validation_split: args.data.validation_split,
        seed: args.data.seed,
        clip: args.data.clip,
        ..TrainConfig::default()
    };
    base.validate()?;
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))?,
        ),
        Err(_) => None,
    };
    let data = load_training_data(&args.data)?;
    let store = load_text_embeddings(&args.data.embeddings)?;
    let model_config = TaggerConfig::for_dataset(&data, &store)?;
    let outcome = random_search(&space, args.trials, &data, &store, &model_config, &base, threads)?;

    let mut out = String::from("trial,lstm_state,dropout,batch_size,lr,epochs,po,val_f1\n");
    for t in &outcome.trials {
        let c = &t.config;
        let f1 = match &t.outcome {
            Ok(o) => o.best_f1().map_or("".into(), |f| format!("{f:.6}")),
            Err(e) => {
                eprintln!("trial {} failed: {e}", t.index);
                "failed".into()
            }
        };
        out.push_str(&format!(
            "{},{},{:.6},{},{:.6e},{},{:.6},{}\n",
            t.index, c.lstm_state, c.train.dropout, c.train.batch_size, c.train.lr, c.train.epochs, c.train.po, f1
        ));
    }
    write_text(args.output.as_deref(), &out)?;
    let best = outcome.best_trial();
    eprintln!(
        "best trial {} with validation F1 {:.2}",
        best.index,
        100.0 * best.best_f1().unwrap_or(0.0)
    );
    if let (Some(path), Ok(o)) = (&args.model, &best.outcome) {
        save_model(&o.model, store.name(), path)?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arguments() {
        assert_eq!(parse_split("train=a/b.tsv").unwrap(), ("train".into(), PathBuf::from("a/b.tsv")));
        assert!(parse_split("train").is_err());
        assert!(parse_split("=x").is_err());
    }

    #[test]
    fn range_arguments() {
        assert_eq!(parse_range::<usize>("2:5").unwrap(), (2, 5));
        assert!(parse_range::<usize>("2-5").is_err());
        assert!(parse_range::<usize>("a:5").is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Empty("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::UnknownTags(vec![])), EXIT_DATA);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERIC);
    }

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(run(["ner-forge", "train", "--train", "x"]), EXIT_USAGE);
        assert_eq!(run(["ner-forge", "--help"]), EXIT_OK);
        assert_eq!(run(["ner-forge", "bogus"]), EXIT_USAGE);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
