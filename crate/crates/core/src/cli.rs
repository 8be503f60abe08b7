//! The `figcap` command line: clean, build-vocab, train, eval, caption.
//!
//! Machine-readable results go to stdout as JSON; progress and errors go to
//! stderr. Exit codes: 0 success, 1 runtime failure, 2 usage or validation
//! failure.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{self, ScicapRecord, TokenizedExample, Vocabulary};
use crate::error::Error;
use crate::features::{read_features, FeatureSource};
use crate::metrics::{bleu4_corpus, bleu4_sentence, score_histogram, BleuReport, Smoothing};
use crate::model::{CaptionModel, Checkpoint, ModelConfig, Parameters};
use crate::training::{self, caption_body, record_inputs, OptimizerConfig, TrainData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "figcap",
    version,
    about = "Caption generation for scientific figures"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drop records whose figure text is shorter than a threshold.
    Clean {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_text_len: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Build a vocabulary from a JSONL split.
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long, default_value_t = 1000)]
        max_size: usize,
    },
    /// Train a model; writes checkpoints and a metrics log to the output dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy-decode a split and score it with BLEU-4.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Report path; defaults to `eval-<split>.json` in the output dir.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Caption one record given as inline JSON or a path to a JSON file.
    Caption {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record: String,
        #[arg(long)]
        beam: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Vision,
    Text,
    Fusion,
    Knowledge,
}

impl Ablation {
    pub fn apply(self, config: &mut ModelConfig) {
        match self {
            Ablation::Vision => config.use_vision = false,
            Ablation::Text => config.use_text = false,
            Ablation::Fusion => config.use_fusion = false,
            Ablation::Knowledge => config.use_knowledge = false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum FeaturesConfig {
    /// Deterministic toy image vectors of length `model.d_clip`.
    Toy {
        #[serde(default)]
        seed: u64,
    },
    /// An `FCF1` file keyed by feature reference.
    File { path: PathBuf },
}

fn default_min_freq() -> usize {
    1
}

fn default_max_caption_len() -> usize {
    32
}

fn default_max_text_len() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub features: FeaturesConfig,
    /// Records with shorter trimmed figure text are dropped on load.
    #[serde(default)]
    pub min_text_len: usize,
    /// Caption length cap including BOS and EOS.
    #[serde(default = "default_max_caption_len")]
    pub max_caption_len: usize,
    #[serde(default = "default_max_text_len")]
    pub max_text_len: usize,
    /// Vocabulary file; built from the train split when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "default_min_freq")]
    pub vocab_min_freq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses `path`, resolves relative paths against its directory, and
    /// validates every section.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        let problems = cfg.violations();
        if !problems.is_empty() {
            return Err(CliError::usage(format!(
                "invalid config {}:\n  {}",
                path.display(),
                problems.join("\n  ")
            )));
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.dataset;
        fix(&mut d.train);
        d.val
            .iter_mut()
            .chain(d.test.iter_mut())
            .chain(d.vocab.iter_mut())
            .for_each(fix);
        if let FeaturesConfig::File { path } = &mut d.features {
            fix(path);
        }
        fix(&mut self.output.dir);
    }

    /// Every violated key with its reason, as `section.key: reason`.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, m) in self.model.violations() {
            out.push(format!("model.{k}: {m}"));
        }
        for (k, m) in self.optimizer.violations() {
            out.push(format!("optimizer.{k}: {m}"));
        }
        let d = &self.dataset;
        if d.max_caption_len < 3 {
            out.push(format!(
                "dataset.max_caption_len: must be at least 3, got {}",
                d.max_caption_len
            ));
        } else if d.max_caption_len > self.model.max_caption_len {
            out.push(format!(
                "dataset.max_caption_len: {} exceeds model.max_caption_len {}",
                d.max_caption_len, self.model.max_caption_len
            ));
        }
        if d.max_text_len == 0 {
            out.push("dataset.max_text_len: must be at least 1".into());
        }
        out
    }

    pub fn split_path(&self, split: Split) -> CliResult<&Path> {
        let p = match split {
            Split::Train => Some(&self.dataset.train),
            Split::Val => self.dataset.val.as_ref(),
            Split::Test => self.dataset.test.as_ref(),
        };
        p.map(PathBuf::as_path).ok_or_else(|| {
            CliError::usage(format!("dataset.{}: no path configured", split_name(split)))
        })
    }

    pub fn feature_source(&self, model: &ModelConfig) -> CliResult<FeatureSource> {
        match &self.dataset.features {
            FeaturesConfig::Toy { seed } => Ok(FeatureSource::Toy {
                dim: model.d_clip,
                seed: *seed,
            }),
            FeaturesConfig::File { path } if model.use_vision => {
                require_file(path, "dataset.features.path")?;
                Ok(FeatureSource::File(read_features(path)?))
            }
            FeaturesConfig::File { .. } => Ok(FeatureSource::File(Default::default())),
        }
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "{what}: {} does not exist",
            path.display()
        )))
    }
}

fn load_split(cfg: &RunConfig, path: &Path) -> CliResult<Vec<ScicapRecord>> {
    require_file(path, "dataset split")?;
    let (kept, _) = dataset::clean(dataset::load_records(path)?, cfg.dataset.min_text_len);
    Ok(kept)
}

fn tokenize_all(
    cfg: &RunConfig,
    records: &[ScicapRecord],
    vocab: &Vocabulary,
) -> CliResult<Vec<TokenizedExample>> {
    records
        .iter()
        .map(|r| {
            TokenizedExample::from_record(
                r,
                vocab,
                cfg.dataset.max_caption_len,
                cfg.dataset.max_text_len,
            )
            .map_err(CliError::from)
        })
        .collect()
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn cmd_clean(input: &Path, output: &Path, min_text_len: usize, report: &Path) -> CliResult<()> {
    require_file(input, "--input")?;
    let (kept, rep) = dataset::clean(dataset::load_records(input)?, min_text_len);
    dataset::write_records(output, &kept)?;
    fs::write(report, serde_json::to_string_pretty(&rep)?)?;
    eprintln!("kept {} of {} records", rep.kept_count, rep.input_count);
    print_json(&rep)
}

fn cmd_build_vocab(input: &Path, output: &Path, min_freq: usize, max_size: usize) -> CliResult<()> {
    require_file(input, "--input")?;
    let records = dataset::load_records(input)?;
    let vocab = Vocabulary::build(&records, min_freq, max_size)?;
    vocab.save(output)?;
    print_json(&json!({ "vocab_size": vocab.len(), "path": output }))
}

fn vocab_for_training(cfg: &RunConfig, train: &[ScicapRecord]) -> CliResult<Vocabulary> {
    let vocab = match &cfg.dataset.vocab {
        Some(p) => {
            require_file(p, "dataset.vocab")?;
            Vocabulary::load(p)?
        }
        None => Vocabulary::build(train, cfg.dataset.vocab_min_freq, cfg.model.vocab_size)?,
    };
    if vocab.len() != cfg.model.vocab_size {
        return Err(CliError::usage(format!(
            "model.vocab_size: is {} but the vocabulary has {} tokens",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    Ok(vocab)
}

fn mismatch_error(expected: &ModelConfig, found: &ModelConfig, what: &str) -> Option<CliError> {
    let fields = expected.diff(found);
    if fields.is_empty() {
        return None;
    }
    let names: Vec<_> = fields.iter().map(|f| format!("model.{f}")).collect();
    Some(CliError::usage(format!(
        "{what} model config differs in {}",
        names.join(", ")
    )))
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let train_records = load_split(&cfg, &cfg.dataset.train)?;
    let val_records = match &cfg.dataset.val {
        Some(p) => load_split(&cfg, p)?,
        None => Vec::new(),
    };
    let (model, vocab, start) = match resume {
        Some(path) => {
            require_file(path, "--resume")?;
            let ckpt = Checkpoint::load(path)?;
            if let Some(err) = mismatch_error(&cfg.model, &ckpt.config, "resume checkpoint") {
                return Err(err);
            }
            let vocab = match ckpt.vocab.clone() {
                Some(v) => v,
                None => vocab_for_training(&cfg, &train_records)?,
            };
            let progress = ckpt.progress.clone();
            (CaptionModel::from_checkpoint(ckpt), vocab, progress)
        }
        None => {
            let vocab = vocab_for_training(&cfg, &train_records)?;
            (
                CaptionModel::new(cfg.model.clone(), cfg.optimizer.seed)?,
                vocab,
                None,
            )
        }
    };
    let train_ex = tokenize_all(&cfg, &train_records, &vocab)?;
    let val_ex = tokenize_all(&cfg, &val_records, &vocab)?;
    let features = cfg.feature_source(&cfg.model)?;

    fs::create_dir_all(&cfg.output.dir)?;
    let metrics_path = out_path(&cfg, "metrics.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(start.is_some())
        .truncate(start.is_none())
        .open(&metrics_path)?;
    let last_path = out_path(&cfg, "last.fck");
    let best_path = out_path(&cfg, "best.fck");

    let data = TrainData {
        train: &train_ex,
        val: &val_ex,
        features: &features,
    };
    let outcome = training::train(model, &cfg.optimizer, &data, start.as_ref(), |report| {
        writeln!(log, "{}", serde_json::to_string(report.metrics)?)?;
        let ckpt = Checkpoint {
            config: report.model.config.clone(),
            params: report.model.params.clone(),
            vocab: Some(vocab.clone()),
            progress: Some(report.state.progress()),
        };
        ckpt.save(&last_path)?;
        if report.improved || val_ex.is_empty() {
            ckpt.save(&best_path)?;
        }
        eprintln!(
            "epoch {} loss {:.4} val_bleu4 {}",
            report.metrics.epoch,
            report.metrics.train_loss,
            report
                .metrics
                .val_bleu4
                .map_or("-".into(), |b| format!("{b:.4}"))
        );
        Ok(())
    })?;
    if outcome.metrics.is_empty() {
        eprintln!("no epochs left to run");
    }
    print_json(&json!({
        "epochs_run": outcome.metrics.len(),
        "final_train_loss": outcome.metrics.last().map(|m| m.train_loss),
        "best_val_bleu4": outcome.state.best_val_bleu4,
        "checkpoint": best_path,
        "last_checkpoint": last_path,
        "metrics_log": metrics_path,
    }))
}

/// Loads a checkpoint and checks it against the config's model section with
/// `ablations` applied.
fn load_for_inference(
    cfg: &RunConfig,
    path: &Path,
    ablations: &[Ablation],
) -> CliResult<(CaptionModel, Vocabulary)> {
    require_file(path, "--checkpoint")?;
    let mut expected = cfg.model.clone();
    ablations.iter().for_each(|a| a.apply(&mut expected));
    expected
        .validate()
        .map_err(|e| CliError::usage(format!("ablated model is invalid: {e}")))?;
    let ckpt = Checkpoint::load(path)?;
    let tensors = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let params = Parameters::from_tensors(&expected, tensors).map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: format!("checkpoint {} is incompatible: {e}", path.display()),
    })?;
    if let Some(mut err) = mismatch_error(&expected, &ckpt.config, "checkpoint") {
        err.code = EXIT_RUNTIME;
        return Err(err);
    }
    let vocab = match (ckpt.vocab, &cfg.dataset.vocab) {
        (Some(v), _) => v,
        (None, Some(p)) => Vocabulary::load(p)?,
        (None, None) => {
            return Err(CliError::usage(
                "checkpoint has no vocabulary and dataset.vocab is unset",
            ))
        }
    };
    Ok((
        CaptionModel {
            config: expected,
            params,
        },
        vocab,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub reference: String,
    pub generated: String,
    pub bleu4: f64,
}

/// The eval report written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub checkpoint: PathBuf,
    pub ablations: Vec<String>,
    pub count: usize,
    /// `bleu4` is corpus-level; `records` carry sentence-level scores.
    pub level: String,
    pub bleu4: f64,
    pub corpus: BleuReport,
    /// Sentence BLEU-4 counts in ten equal bins over [0, 1].
    pub histogram: [usize; 10],
    pub records: Vec<EvalRecord>,
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    split: Split,
    ablate: &[Ablation],
    report: Option<&Path>,
) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let (model, vocab) = load_for_inference(&cfg, checkpoint, ablate)?;
    let records = load_split(&cfg, cfg.split_path(split)?)?;
    if records.is_empty() {
        return Err(CliError::usage(format!(
            "{} split has no records",
            split_name(split)
        )));
    }
    let examples = tokenize_all(&cfg, &records, &vocab)?;
    let features = cfg.feature_source(&model.config)?;
    // Scored on word strings, so distinct out-of-vocabulary words never match.
    let id_pairs = training::decode_pairs(&model, &examples, &features)?;
    let pairs: Vec<(Vec<String>, Vec<String>)> = id_pairs
        .iter()
        .zip(&records)
        .map(|((cand, _), rec)| {
            let words = cand
                .iter()
                .filter_map(|&i| vocab.token(i))
                .map(str::to_string)
                .collect();
            (words, dataset::tokenize(&rec.caption))
        })
        .collect();
    let corpus = bleu4_corpus(&pairs, Smoothing::Epsilon)?;
    let sentence: Vec<f64> = pairs
        .iter()
        .map(|(c, r)| bleu4_sentence(c, r, Smoothing::Epsilon).bleu4)
        .collect();
    let rep = EvalReport {
        split: split_name(split).into(),
        checkpoint: checkpoint.to_path_buf(),
        ablations: ablate
            .iter()
            .map(|a| format!("{a:?}").to_lowercase())
            .collect(),
        count: pairs.len(),
        level: "corpus".into(),
        bleu4: corpus.bleu4,
        histogram: score_histogram(&sentence),
        records: records
            .iter()
            .zip(&pairs)
            .zip(&sentence)
            .map(|((rec, (cand, _)), &b)| EvalRecord {
                id: rec.id.clone(),
                reference: rec.caption.clone(),
                generated: cand.join(" "),
                bleu4: b,
            })
            .collect(),
        corpus,
    };
    let path = match report {
        Some(p) => p.to_path_buf(),
        None => {
            fs::create_dir_all(&cfg.output.dir)?;
            out_path(&cfg, &format!("eval-{}.json", split_name(split)))
        }
    };
    serde_json::to_writer_pretty(File::create(&path)?, &rep)?;
    eprintln!("BLEU-4 {:.4} over {} records", rep.bleu4, rep.count);
    print_json(
        &json!({ "split": rep.split, "bleu4": rep.bleu4, "count": rep.count, "report": path }),
    )
}

fn parse_record(arg: &str) -> CliResult<ScicapRecord> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg)?
    } else {
        arg.to_string()
    };
    let record: ScicapRecord = serde_json::from_str(text.trim()).map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: format!("malformed record: {e}"),
    })?;
    if record.id.is_empty() {
        return Err(CliError {
            code: EXIT_RUNTIME,
            message: "malformed record: empty id".into(),
        });
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutput {
    pub id: String,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

fn cmd_caption(
    config: &Path,
    checkpoint: &Path,
    record: &str,
    beam: Option<usize>,
) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let record = parse_record(record)?;
    let (model, vocab) = load_for_inference(&cfg, checkpoint, &[])?;
    let example = TokenizedExample {
        id: record.id.clone(),
        caption_ids: Vec::new(),
        figure_text_ids: vocab.encode_text(&record.figure_text, cfg.dataset.max_text_len),
        abstract_ids: vocab.encode_text(&record.abstract_text, cfg.dataset.max_text_len),
        feature_ref: record.feature_ref.clone(),
    };
    let features = cfg.feature_source(&model.config)?;
    let inputs = record_inputs(&model, &example, &features)?;
    let hyp = match beam {
        None => model.greedy_decode(&inputs, model.max_decode_len())?,
        Some(k) => model.beam_decode(&inputs, k, model.max_decode_len())?,
    };
    print_json(&CaptionOutput {
        id: record.id,
        caption: vocab.decode(&caption_body(&hyp.tokens)),
        tokens: hyp.tokens,
        log_prob: hyp.log_prob,
        finished: hyp.finished,
    })
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Clean {
            input,
            output,
            min_text_len,
            report,
        } => cmd_clean(&input, &output, min_text_len, &report),
        Command::BuildVocab {
            input,
            output,
            min_freq,
            max_size,
        } => cmd_build_vocab(&input, &output, min_freq, max_size),
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            split,
            ablate,
            report,
        } => cmd_eval(&config, &checkpoint, split, &ablate, report.as_deref()),
        Command::Caption {
            config,
            checkpoint,
            record,
            beam,
        } => cmd_caption(&config, &checkpoint, &record, beam),
    }
}

/// Parses `args`, runs the command and returns the exit code.
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
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
