//! Command-line front end.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 numerical
//! failure, 3 verification failure.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{
    self, ClassDistribution, EmbeddingDataset, FrameSequence, LabelSpace, PredictionRecord,
};
use crate::ensemble::{self, Resolution, TiebreakPolicy, VoteTable};
use crate::error::Error;
use crate::losses::{softmax, LossConfig};
use crate::metrics::{self, balanced_indices, F1Report};
use crate::model::{Architecture, ClassifierModel, LoraSpec};
use crate::pooling::default_attention_dim;
use crate::rng::{stream_rng, Stream};
use crate::trainer::{self, argmax, Example, TrainConfig, TrainEvent};
use crate::verify::{self, SuiteOptions};

pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_numerical() {
                EXIT_NUMERIC
            } else {
                EXIT_INPUT
            },
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(
    name = "imbalance-kit",
    version,
    about = "Train, evaluate, verify and fuse imbalance-aware classifier heads"
)]
pub struct Cli {
    /// Worker threads for per-sample forward/backward; results are identical for any value
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a head from an experiment config and keep the best-validation checkpoint
    Train {
        /// Experiment JSON config
        config: PathBuf,
        /// Overrides the config's output_dir
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score a checkpoint on labelled data and write predictions for `fuse`
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Embeddings JSONL, or frame-sequence JSONL for pooled models
        #[arg(long)]
        data: PathBuf,
        /// Labels manifest; must list the checkpoint's classes in order
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Model id written into the predictions CSV
        #[arg(long, default_value = "model")]
        model_id: String,
        /// Predictions CSV output
        #[arg(long)]
        out: Option<PathBuf>,
        /// Truth CSV (sample_id,label) output
        #[arg(long)]
        truth_out: Option<PathBuf>,
        /// Frames kept per sequence for pooled models
        #[arg(long, default_value_t = 1000)]
        max_frames: usize,
    },
    /// Majority-vote fusion of prediction CSVs
    Fuse {
        /// Prediction CSVs (sample_id,model_id,label[,p_0..])
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
        /// Tiebreaker model id, or `auto` for the best standalone model (needs --truth)
        #[arg(long)]
        tiebreaker: String,
        /// Truth CSV (sample_id,label); enables F1 reporting
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Rank every model subset of at least this size (needs --truth)
        #[arg(long, value_name = "MIN_SIZE")]
        combinations: Option<usize>,
        /// Labels manifest used for class names and the class count
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Fused CSV output (sample_id,label,tie)
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every analytic gradient
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        /// Perturb a component's analytic gradient (harness self-test)
        #[arg(long, hide = true)]
        corrupt: Vec<String>,
    },
    /// Draw an equal number of samples per class
    Balance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate Gaussian-cluster embeddings with a skewed class distribution
    Synth {
        /// Labels manifest with counts; otherwise classes are named c0..cN
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        /// Largest class size when counts come from --ratio
        #[arg(long, default_value_t = 260)]
        max_count: u64,
        /// Majority:minority ratio, counts falling geometrically
        #[arg(long, default_value_t = 26.0)]
        ratio: f64,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training embeddings output
        #[arg(long)]
        out: PathBuf,
        /// Also write a balanced held-out split with this many samples per class
        #[arg(long, requires = "val_out")]
        val_per_class: Option<usize>,
        #[arg(long)]
        val_out: Option<PathBuf>,
        /// Write a labels manifest with the training counts
        #[arg(long)]
        manifest_out: Option<PathBuf>,
    },
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    if cli.threads == 0 {
        return Err(Failure::input("--threads must be >= 1"));
    }
    match cli.command {
        Command::Train { config, output_dir } => {
            cmd_train(&config, output_dir.as_deref(), cli.threads)
                .map(|out| print!("{}", out.summary))
        }
        Command::Eval {
            checkpoint,
            data,
            labels,
            model_id,
            out,
            truth_out,
            max_frames,
        } => cmd_eval(
            &checkpoint,
            &data,
            labels.as_deref(),
            &model_id,
            out.as_deref(),
            truth_out.as_deref(),
            max_frames,
        ),
        Command::Fuse {
            predictions,
            tiebreaker,
            truth,
            combinations,
            labels,
            out,
        } => cmd_fuse(
            &predictions,
            &tiebreaker,
            truth.as_deref(),
            combinations,
            labels.as_deref(),
            &out,
        ),
        Command::Gradcheck {
            seed,
            batch,
            classes,
            epsilon,
            corrupt,
        } => cmd_gradcheck(seed, batch, classes, epsilon, &corrupt),
        Command::Balance {
            data,
            labels,
            per_class,
            seed,
            out,
        } => cmd_balance(&data, &labels, per_class, seed, &out),
        Command::Synth {
            labels,
            classes,
            max_count,
            ratio,
            dim,
            separation,
            seed,
            out,
            val_per_class,
            val_out,
            manifest_out,
        } => cmd_synth(SynthArgs {
            labels,
            classes,
            max_count,
            ratio,
            dim,
            separation,
            seed,
            out,
            val_per_class,
            val_out,
            manifest_out,
        }),
    }
}

// ---- experiment config ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Embeddings,
    Frames,
}

/// Synthetic data drawn in memory instead of read from files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub classes: usize,
    pub max_count: u64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    pub dim: usize,
    pub separation: f64,
    pub val_per_class: usize,
}

fn default_ratio() -> f64 {
    26.0
}

fn default_max_frames() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub format: DataFormat,
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingSection {
    pub enabled: bool,
    /// Defaults to `min(D, 128)`.
    pub attention_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        let spec = LoraSpec::default();
        Self {
            enabled: false,
            rank: spec.rank,
            alpha: spec.alpha,
            dropout: spec.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalancedValSection {
    /// Select checkpoints on a balanced subset of the validation split.
    pub enabled: bool,
    /// Samples per class; defaults to the smallest validation class.
    pub per_class: Option<usize>,
}

impl Default for BalancedValSection {
    fn default() -> Self {
        Self {
            enabled: true,
            per_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pooling: PoolingSection,
    #[serde(default)]
    pub lora: LoraSection,
    #[serde(default)]
    pub balanced_val: BalancedValSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> crate::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> crate::Result<()> {
        let mut train = self.train.clone();
        train.loss = self.loss;
        train.validate()?;
        let d = &self.data;
        match (&d.synthetic, &d.train, &d.val) {
            (Some(_), None, None) => {}
            (None, Some(_), Some(_)) => {}
            (Some(_), _, _) => {
                return Err(Error::Config(
                    "data: give either synthetic or train/val paths".into(),
                ))
            }
            _ => {
                return Err(Error::Config(
                    "data: train and val paths are required".into(),
                ))
            }
        }
        if d.synthetic.is_none() && d.labels.is_none() {
            return Err(Error::Config(
                "data.labels: a labels manifest is required".into(),
            ));
        }
        if d.synthetic.is_some() && d.format == DataFormat::Frames {
            return Err(Error::Config(
                "data.format: synthetic data is embeddings only".into(),
            ));
        }
        if (d.format == DataFormat::Frames) != self.pooling.enabled {
            return Err(Error::Config(
                "pooling.enabled: frame data needs pooling and embeddings must not use it".into(),
            ));
        }
        if d.max_frames == 0 {
            return Err(Error::Config("data.max_frames must be >= 1".into()));
        }
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be >= 1".into()));
        }
        if self.lora.enabled && (self.lora.rank == 0 || !(0.0..1.0).contains(&self.lora.dropout)) {
            return Err(Error::Config(
                "lora: rank must be >= 1 and dropout in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::input(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

enum Split {
    Embeddings(Vec<data::Sample>),
    Frames(Vec<FrameSequence>),
}

impl Split {
    fn len(&self) -> usize {
        match self {
            Split::Embeddings(s) => s.len(),
            Split::Frames(s) => s.len(),
        }
    }

    fn labels(&self) -> Vec<usize> {
        match self {
            Split::Embeddings(s) => s.iter().map(Example::label).collect(),
            Split::Frames(s) => s.iter().map(Example::label).collect(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Split::Embeddings(s) => s[0].features.len(),
            Split::Frames(s) => s[0].frames.ncols(),
        }
    }

    fn select(&self, keep: &[usize]) -> Split {
        match self {
            Split::Embeddings(s) => Split::Embeddings(keep.iter().map(|&i| s[i].clone()).collect()),
            Split::Frames(s) => Split::Frames(keep.iter().map(|&i| s[i].clone()).collect()),
        }
    }
}

struct LoadedData {
    labels: LabelSpace,
    dist: ClassDistribution,
    train: Split,
    val: Split,
    test: Option<Split>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_split(path: &Path, labels: &LabelSpace, config: &DataSection) -> crate::Result<Split> {
    Ok(match config.format {
        DataFormat::Embeddings => {
            Split::Embeddings(data::load_embeddings(path, labels)?.into_samples())
        }
        DataFormat::Frames => {
            Split::Frames(data::load_frame_sequences(path, labels, config.max_frames)?)
        }
    })
}

fn load_data(config: &ExperimentConfig, base: &Path) -> crate::Result<LoadedData> {
    if let Some(s) = &config.data.synthetic {
        let names: Vec<String> = (0..s.classes).map(|c| format!("c{c}")).collect();
        let labels = LabelSpace::new(names)?;
        let dist = ClassDistribution::geometric(s.classes, s.max_count, s.ratio)?;
        let train_counts: Vec<usize> = dist.counts().iter().map(|&n| n as usize).collect();
        let (train, val) = data::generate_split(
            &labels,
            &train_counts,
            &vec![s.val_per_class; s.classes],
            s.dim,
            s.separation,
            config.seed,
        )?;
        return Ok(LoadedData {
            labels,
            dist,
            train: Split::Embeddings(train.into_samples()),
            val: Split::Embeddings(val.into_samples()),
            test: None,
        });
    }
    let d = &config.data;
    let manifest =
        data::load_labels_manifest(resolve(base, d.labels.as_ref().expect("validated")))?;
    let labels = manifest.labels;
    let train = load_split(
        &resolve(base, d.train.as_ref().expect("validated")),
        &labels,
        d,
    )?;
    let val = load_split(
        &resolve(base, d.val.as_ref().expect("validated")),
        &labels,
        d,
    )?;
    let test = d
        .test
        .as_ref()
        .map(|p| load_split(&resolve(base, p), &labels, d))
        .transpose()?;
    let dist = match manifest.counts {
        Some(c) => c,
        None => ClassDistribution::from_labels(train.labels(), labels.len())?,
    };
    Ok(LoadedData {
        labels,
        dist,
        train,
        val,
        test,
    })
}

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files and text produced by a training run.
pub struct TrainOutput {
    pub checkpoint_path: PathBuf,
    pub report_path: PathBuf,
    pub log_path: PathBuf,
    pub summary: String,
}

pub fn cmd_train(
    config_path: &Path,
    output_dir: Option<&Path>,
    threads: usize,
) -> CliResult<TrainOutput> {
    let bytes = fs::read(config_path)
        .map_err(|e| Failure::input(format!("{}: {e}", config_path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Failure::input("config is not UTF-8"))?;
    let config = ExperimentConfig::parse(text)?;
    let hash = config_hash(&bytes);
    let base = config_path.parent().unwrap_or(Path::new("."));
    let loaded = load_data(&config, base)?;

    let mut train_config = config.train.clone();
    train_config.loss = config.loss;
    train_config.seed = config.seed;
    train_config.threads = threads;

    let val = if config.balanced_val.enabled {
        let per_class = match config.balanced_val.per_class {
            Some(n) => n,
            None => {
                let labels = loaded.val.labels();
                (0..loaded.labels.len())
                    .map(|c| labels.iter().filter(|&&l| l == c).count())
                    .min()
                    .unwrap_or(0)
            }
        };
        let keep = balanced_indices(
            &loaded.val.labels(),
            |&l| l,
            &loaded.labels,
            per_class,
            config.seed,
        )?;
        loaded.val.select(&keep)
    } else {
        loaded
            .val
            .select(&(0..loaded.val.len()).collect::<Vec<_>>())
    };

    let dim = loaded.train.dim();
    let arch = Architecture {
        hidden: config.model.hidden,
        pooling: config.pooling.enabled.then(|| {
            config
                .pooling
                .attention_dim
                .unwrap_or_else(|| default_attention_dim(dim))
        }),
        lora: config.lora.enabled.then_some(LoraSpec {
            rank: config.lora.rank,
            alpha: config.lora.alpha,
            dropout: config.lora.dropout,
        }),
    };
    let model = ClassifierModel::build(
        &arch,
        dim,
        loaded.labels.len(),
        &mut stream_rng(config.seed, Stream::Init, 0),
    )?;

    let mut log = String::new();
    let mut observer = |event: TrainEvent| {
        if let TrainEvent::EpochEnd { record, .. } = event {
            let _ = writeln!(
                log,
                "epoch {} train_loss {:.6} val_macro_f1 {:.6}",
                record.epoch, record.train_loss, record.val_macro_f1
            );
        }
    };
    let (outcome, test_report) = match (&loaded.train, &val, &loaded.test) {
        (Split::Embeddings(tr), Split::Embeddings(va), test) => {
            let o = trainer::train_with(model, tr, va, &loaded.dist, &train_config, &mut observer)?;
            let t = match test {
                Some(Split::Embeddings(te)) => Some(score(&o.best_model, te)?),
                _ => None,
            };
            (o, t)
        }
        (Split::Frames(tr), Split::Frames(va), test) => {
            let o = trainer::train_with(model, tr, va, &loaded.dist, &train_config, &mut observer)?;
            let t = match test {
                Some(Split::Frames(te)) => Some(score(&o.best_model, te)?),
                _ => None,
            };
            (o, t)
        }
        _ => unreachable!("splits share one format"),
    };

    let checkpoint = Checkpoint {
        labels: loaded.labels.clone(),
        model: outcome.best_model,
        val_macro_f1: outcome.report.best_val_f1,
        epoch: outcome.report.best_epoch,
        seed: Some(config.seed),
        config_hash: Some(hash.clone()),
    };
    let mut report = json!({
        "config_hash": hash,
        "seed": config.seed,
        "loss": config.loss,
        "train": config.train,
        "class_counts": loaded.dist.counts(),
        "train_samples": loaded.train.len(),
        "val_samples": val.len(),
        "balanced_val": config.balanced_val.enabled,
        "epochs": outcome.report.epochs,
        "best_epoch": outcome.report.best_epoch,
        "best_val_f1": outcome.report.best_val_f1,
    });
    if let Some(t) = &test_report {
        report["test"] = t.to_json(&loaded.labels);
    }

    let out_dir = match output_dir {
        Some(p) => p.to_path_buf(),
        None => resolve(base, &config.output_dir),
    };
    let checkpoint_path = out_dir.join("checkpoint.json");
    let report_path = out_dir.join("report.json");
    let log_path = out_dir.join("train.log");
    write_file(&checkpoint_path, checkpoint.to_json())?;
    let mut report_text = serde_json::to_string_pretty(&report).expect("report serializes");
    report_text.push('\n');
    write_file(&report_path, report_text)?;
    write_file(&log_path, &log)?;

    let mut summary = log;
    let _ = writeln!(
        summary,
        "best epoch {} val_macro_f1 {:.6}\ncheckpoint {}\nreport {}",
        checkpoint.epoch,
        checkpoint.val_macro_f1,
        checkpoint_path.display(),
        report_path.display()
    );
    if let Some(t) = &test_report {
        summary.push_str("test set:\n");
        summary.push_str(&t.table(&loaded.labels));
    }
    Ok(TrainOutput {
        checkpoint_path,
        report_path,
        log_path,
        summary,
    })
}

fn score<E: Example>(model: &ClassifierModel, examples: &[E]) -> crate::Result<F1Report> {
    let predicted = trainer::predict(model, examples)?;
    let truth: Vec<usize> = examples.iter().map(Example::label).collect();
    metrics::f1_report(&truth, &predicted, model.output_dim())
}

pub fn cmd_eval(
    checkpoint: &Path,
    data_path: &Path,
    labels_path: Option<&Path>,
    model_id: &str,
    out: Option<&Path>,
    truth_out: Option<&Path>,
    max_frames: usize,
) -> CliResult {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(p) = labels_path {
        let manifest = data::load_labels_manifest(p)?;
        if manifest.labels != ckpt.labels {
            return Err(Failure::input(format!(
                "labels manifest {} does not match the checkpoint's classes",
                p.display()
            )));
        }
    }
    let labels = &ckpt.labels;
    let mut ids = Vec::new();
    let mut truth = Vec::new();
    let mut logits = Vec::new();
    if ckpt.model.takes_frames() {
        for s in data::load_frame_sequences(data_path, labels, max_frames)? {
            logits.push(ckpt.model.forward(s.input())?);
            ids.push(s.id);
            truth.push(s.label);
        }
    } else {
        let ds = data::load_embeddings(data_path, labels)?;
        if ds.dimension() != ckpt.model.input_dim() {
            return Err(Failure::input(format!(
                "data has dimension {}, checkpoint expects {}",
                ds.dimension(),
                ckpt.model.input_dim()
            )));
        }
        for s in ds.into_samples() {
            logits.push(ckpt.model.forward(s.input())?);
            ids.push(s.id);
            truth.push(s.label);
        }
    }
    let mut records = Vec::with_capacity(ids.len());
    let mut predicted = Vec::with_capacity(ids.len());
    for (id, z) in ids.iter().zip(&logits) {
        let z = z.as_slice().expect("contiguous");
        let label = argmax(z);
        predicted.push(label);
        records.push(PredictionRecord {
            sample_id: id.clone(),
            model_id: model_id.to_string(),
            label,
            probabilities: Some(softmax(z)?),
        });
    }
    let report = metrics::f1_report(&truth, &predicted, labels.len())?;
    print!("{}", report.table(labels));
    if let Some(path) = out {
        let mut buf = Vec::new();
        ensemble::write_predictions_csv(&records, &mut buf)?;
        write_file(path, buf)?;
    }
    if let Some(path) = truth_out {
        let mut buf = Vec::new();
        ensemble::write_truth_csv(
            ids.iter().map(String::as_str).zip(truth.iter().copied()),
            &mut buf,
        )?;
        write_file(path, buf)?;
    }
    Ok(())
}

fn numbered_labels(classes: usize) -> crate::Result<LabelSpace> {
    LabelSpace::new((0..classes).map(|c| c.to_string()))
}

pub fn cmd_fuse(
    paths: &[PathBuf],
    tiebreaker: &str,
    truth_path: Option<&Path>,
    combinations: Option<usize>,
    labels_path: Option<&Path>,
    out: &Path,
) -> CliResult {
    let labels = labels_path
        .map(data::load_labels_manifest)
        .transpose()?
        .map(|m| m.labels);
    let mut records = Vec::new();
    let mut ids_per_file: Vec<(PathBuf, BTreeSet<String>)> = Vec::new();
    for p in paths {
        let file = ensemble::parse_predictions_csv(&read_text(p)?)
            .map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
        ids_per_file.push((
            p.clone(),
            file.iter().map(|r| r.sample_id.clone()).collect(),
        ));
        records.extend(file);
    }
    let all: BTreeSet<String> = ids_per_file
        .iter()
        .flat_map(|(_, s)| s.iter().cloned())
        .collect();
    let mut mismatch = String::new();
    for (p, ids) in &ids_per_file {
        let missing: Vec<&str> = all.difference(ids).map(String::as_str).collect();
        if !missing.is_empty() {
            let _ = write!(
                mismatch,
                "\n  {} is missing: {}",
                p.display(),
                missing.join(", ")
            );
        }
    }
    if !mismatch.is_empty() {
        return Err(Failure::input(format!(
            "sample ids differ across prediction files:{mismatch}"
        )));
    }
    let table = VoteTable::new(records, labels.as_ref().map(LabelSpace::len))?;
    let missing = table.missing();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|(s, m)| format!("{s} ({m})")).collect();
        return Err(Failure::input(format!(
            "missing predictions: {}",
            list.join(", ")
        )));
    }
    let labels = match labels {
        Some(l) => l,
        None => numbered_labels(table.num_classes())?,
    };

    let truth = match truth_path {
        Some(p) => {
            let map: HashMap<String, usize> = ensemble::parse_truth_csv(&read_text(p)?)?;
            let aligned = table.align_truth(&map)?;
            if let Some(bad) = aligned.iter().find(|&&l| l >= table.num_classes()) {
                return Err(Failure::input(format!(
                    "true label {bad} outside {} classes",
                    table.num_classes()
                )));
            }
            Some(aligned)
        }
        None => None,
    };
    let models: Vec<&str> = table.models().iter().map(String::as_str).collect();
    let chosen = if tiebreaker == "auto" {
        let truth = truth
            .as_ref()
            .ok_or_else(|| Failure::input("--tiebreaker auto needs --truth"))?;
        ensemble::auto_tiebreaker(&table, &models, truth)?.to_string()
    } else if models.contains(&tiebreaker) {
        tiebreaker.to_string()
    } else {
        return Err(Failure::input(format!(
            "tiebreaker `{tiebreaker}` is not among the models: {}",
            models.join(", ")
        )));
    };

    let fused = ensemble::majority_vote(&table, &models, &chosen)?;
    let mut buf = Vec::new();
    ensemble::write_fused_csv(&table, &fused, &mut buf)?;
    write_file(out, buf)?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "fused {} samples from {} models, tiebreaker {chosen}",
        table.samples().len(),
        models.len()
    );
    let ties = fused.ties().filter(|&t| t).count();
    let _ = writeln!(
        text,
        "ties: {ties} ({} settled by the tiebreaker's vote)",
        fused.count(Resolution::TiebreakerVote)
    );
    let by_prob = fused.count(Resolution::TiebreakerProbability);
    let by_index = fused.count(Resolution::LowestIndex);
    if by_prob + by_index > 0 {
        let _ = writeln!(
            text,
            "note: {} tie(s) excluded the tiebreaker's vote; {by_prob} went to the tied class the tiebreaker rated most probable, {by_index} to the lowest tied class index",
            by_prob + by_index
        );
    }
    if let Some(truth) = &truth {
        let report = metrics::f1_report(truth, &fused.labels, table.num_classes())?;
        text.push_str(&report.table(&labels));
    }
    if let Some(min_size) = combinations {
        let truth = truth
            .as_ref()
            .ok_or_else(|| Failure::input("--combinations needs --truth"))?;
        let policy = if tiebreaker == "auto" {
            TiebreakPolicy::Auto
        } else {
            TiebreakPolicy::Fixed(chosen.clone())
        };
        let ranked = ensemble::enumerate_combinations(&table, min_size, truth, &policy)?;
        let _ = writeln!(text, "rank  macro_f1  tiebreaker  models");
        for (i, r) in ranked.iter().enumerate() {
            let _ = writeln!(
                text,
                "{:<4}  {:.6}  {:<10}  {}",
                i + 1,
                r.report.macro_f1,
                r.tiebreaker,
                r.models.join("+")
            );
        }
    }
    print!("{text}");
    Ok(())
}

pub fn cmd_gradcheck(
    seed: u64,
    batch: usize,
    classes: usize,
    epsilon: f64,
    corrupt: &[String],
) -> CliResult {
    if let Some(bad) = corrupt
        .iter()
        .find(|c| !verify::COMPONENTS.contains(&c.as_str()))
    {
        return Err(Failure::input(format!(
            "unknown component `{bad}` (expected one of {})",
            verify::COMPONENTS.join(", ")
        )));
    }
    let corrupt: Vec<&str> = corrupt.iter().map(String::as_str).collect();
    let options = SuiteOptions {
        seed,
        batch,
        classes,
        epsilon,
    };
    let results = verify::run_suite(&options, &corrupt)?;
    let mut failing = Vec::new();
    for r in &results {
        println!(
            "{:<16} max_rel_error {:.3e}  {}",
            r.name,
            r.max_relative_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failing.push(r.name);
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!("gradient check failed for: {}", failing.join(", ")),
        })
    }
}

pub fn cmd_balance(
    data_path: &Path,
    labels_path: &Path,
    per_class: usize,
    seed: u64,
    out: &Path,
) -> CliResult {
    let labels = data::load_labels_manifest(labels_path)?.labels;
    let ds = data::load_embeddings(data_path, &labels)?;
    let subset = metrics::balanced_subset(&ds, &labels, per_class, seed)?;
    let mut buf = Vec::new();
    data::write_embeddings(&subset, &labels, &mut buf)?;
    write_file(out, buf)?;
    println!(
        "wrote {} samples ({per_class} per class) to {}",
        subset.len(),
        out.display()
    );
    Ok(())
}

pub struct SynthArgs {
    pub labels: Option<PathBuf>,
    pub classes: usize,
    pub max_count: u64,
    pub ratio: f64,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub val_per_class: Option<usize>,
    pub val_out: Option<PathBuf>,
    pub manifest_out: Option<PathBuf>,
}

pub fn cmd_synth(args: SynthArgs) -> CliResult {
    let (labels, dist) = match &args.labels {
        Some(p) => {
            let m = data::load_labels_manifest(p)?;
            let counts = m.counts.ok_or_else(|| {
                Failure::input(format!(
                    "{}: synth needs a manifest with counts",
                    p.display()
                ))
            })?;
            (m.labels, counts)
        }
        None => (
            LabelSpace::new((0..args.classes).map(|c| format!("c{c}")))?,
            ClassDistribution::geometric(args.classes, args.max_count, args.ratio)?,
        ),
    };
    let train_counts: Vec<usize> = dist.counts().iter().map(|&n| n as usize).collect();
    let held = vec![args.val_per_class.unwrap_or(0); labels.len()];
    let (train, val) = data::generate_split(
        &labels,
        &train_counts,
        &held,
        args.dim,
        args.separation,
        args.seed,
    )?;
    write_dataset(&train, &labels, &args.out)?;
    if let (Some(_), Some(path)) = (args.val_per_class, &args.val_out) {
        write_dataset(&val, &labels, path)?;
    }
    if let Some(path) = &args.manifest_out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::input(format!("{}: {e}", parent.display())))?;
        }
        data::write_labels_manifest(&labels, Some(&dist), path)?;
    }
    let mut stdout = std::io::stdout();
    let _ = writeln!(
        stdout,
        "wrote {} training samples, counts {:?}",
        train.len(),
        dist.counts()
    );
    Ok(())
}

fn write_dataset(ds: &EmbeddingDataset, labels: &LabelSpace, path: &Path) -> CliResult {
    let mut buf = Vec::new();
    data::write_embeddings(ds, labels, &mut buf)?;
    write_file(path, buf)
}
