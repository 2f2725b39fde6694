//! Command-line interface: `prepare`, `train`, `evaluate`, `predict` and
//! `gradcheck`.
//!
//! Exit codes: 0 success, 1 failed check, 2 invalid config or data, 3
//! numeric abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluation::{
    fold_in, label_precision, perplexity, score_items, score_labels_batch, top_r, DatasetIdentity,
    EvalError, EvalReport, MetricKind,
};
use crate::gradcheck::{run_suite, GradcheckOptions};
use crate::models::{
    checkpoint_digest, load_checkpoint, save_checkpoint, Modality, Model, ModelConfig, ModelError,
    Variant,
};
use crate::sparse_data::{
    load_binary, load_bow, load_multilabel, save_bow, save_multilabel, split_heldout, BinaryMatrix,
    FeatureMatrix, SparseCountMatrix,
};
use crate::synthetic::{
    bursty_corpus, implicit_feedback, nb_mixture_corpus, planted_multilabel, BurstySpec,
    ImplicitSpec, MultilabelSpec, NbMixtureSpec,
};
use crate::training::{train, write_history, TrainConfig, TrainData, TrainError, Validation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Check(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => EXIT_CHECK,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Check(m) | CliError::Numeric(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Check(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

fn default_latent_dim() -> usize {
    64
}

fn default_encoder_layers() -> Vec<usize> {
    vec![128, 64]
}

fn default_decoder_layers() -> Vec<usize> {
    vec![64, 128]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_encoder_layers")]
    pub encoder_layers: Vec<usize>,
    #[serde(default = "default_decoder_layers")]
    pub decoder_layers: Vec<usize>,
    /// Inferred from the training data when absent.
    #[serde(default)]
    pub input_dim: Option<usize>,
    /// Inferred from the training features when absent (`nbvae_c` only).
    #[serde(default)]
    pub feature_dim: Option<usize>,
    #[serde(default)]
    pub ablate_feature_encoder: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub modality: Modality,
    pub train: PathBuf,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

fn default_heldout_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Cutoffs for ranking metrics; filled per modality when empty.
    #[serde(default)]
    pub r_values: Vec<usize>,
    #[serde(default = "default_heldout_fraction")]
    pub heldout_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Metric families; filled per modality when empty.
    #[serde(default)]
    pub metrics: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            r_values: Vec::new(),
            heldout_fraction: default_heldout_fraction(),
            split_seed: 0,
            metrics: Vec::new(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Parses a config file. Relative paths are taken relative to the
    /// file's directory and made absolute.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let absolute = |p: &Path| -> PathBuf {
            let joined = if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            };
            std::path::absolute(&joined).unwrap_or(joined)
        };
        cfg.data.train = absolute(&cfg.data.train);
        cfg.data.validation = cfg.data.validation.as_deref().map(absolute);
        cfg.data.test = cfg.data.test.as_deref().map(absolute);
        cfg.output_dir = absolute(&cfg.output_dir);
        Ok(cfg)
    }

    /// Fills defaults that depend on the modality and checks everything that
    /// can be checked without loading data.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        let modality = self.data.modality;
        let variant = self.model.variant;
        if !variant.accepts(modality) {
            return Err(CliError::Config(format!(
                "model.variant: {variant} cannot be used with data.modality {}",
                modality_name(modality)
            )));
        }
        for (field, path) in [
            ("data.train", Some(&self.data.train)),
            ("data.validation", self.data.validation.as_ref()),
            ("data.test", self.data.test.as_ref()),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(CliError::Config(format!(
                        "{field}: {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if self.eval.metrics.is_empty() {
            self.eval.metrics = match modality {
                Modality::Counts => vec!["perplexity".into()],
                Modality::Binary => vec!["recall".into(), "ndcg".into()],
                Modality::Multilabel => vec!["precision".into()],
            };
        }
        if self.eval.r_values.is_empty() {
            self.eval.r_values = match modality {
                Modality::Multilabel => vec![1, 3, 5],
                _ => vec![5, 10, 20],
            };
        }
        if self.eval.r_values.contains(&0) {
            return Err(CliError::Config(
                "eval.r_values: cutoffs must be at least 1".into(),
            ));
        }
        if !(self.eval.heldout_fraction > 0.0 && self.eval.heldout_fraction < 1.0) {
            return Err(CliError::Config(
                "eval.heldout_fraction: must lie in (0, 1)".into(),
            ));
        }
        for name in &self.eval.metrics {
            let kind = MetricKind::parse(name)
                .map_err(|e| CliError::Config(format!("eval.metrics: {e}")))?;
            let ok = match kind {
                MetricKind::Perplexity => {
                    modality == Modality::Counts
                        && matches!(
                            variant,
                            Variant::Nbvae | Variant::NbvaeDm | Variant::Multivae
                        )
                }
                MetricKind::Recall | MetricKind::Ndcg => modality == Modality::Binary,
                MetricKind::Precision => modality == Modality::Multilabel,
            };
            if !ok {
                return Err(CliError::Config(format!(
                    "eval.metrics: {name} is not defined for {variant} on {} data",
                    modality_name(modality)
                )));
            }
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(
        &self,
        input_dim: usize,
        feature_dim: Option<usize>,
    ) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        if let Some(want) = m.input_dim.filter(|&d| d != input_dim) {
            return Err(CliError::Config(format!(
                "model.input_dim: config says {want}, data has {input_dim} columns"
            )));
        }
        let feature_dim = match (m.variant, feature_dim) {
            (Variant::NbvaeC, Some(d)) => {
                if let Some(want) = m.feature_dim.filter(|&w| w != d) {
                    return Err(CliError::Config(format!(
                        "model.feature_dim: config says {want}, data has {d} features"
                    )));
                }
                Some(d)
            }
            _ => None,
        };
        let config = ModelConfig {
            variant: m.variant,
            input_dim,
            latent_dim: m.latent_dim,
            encoder_layers: m.encoder_layers.clone(),
            decoder_layers: m.decoder_layers.clone(),
            feature_dim,
            ablate_feature_encoder: m.ablate_feature_encoder,
            seed: m.seed,
        };
        config
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Counts => "counts",
        Modality::Binary => "binary",
        Modality::Multilabel => "multilabel",
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

pub enum Dataset {
    Counts(SparseCountMatrix),
    Binary(BinaryMatrix),
    Multilabel {
        features: FeatureMatrix,
        labels: BinaryMatrix,
    },
}

impl Dataset {
    pub fn load(modality: Modality, path: &Path) -> Result<Self, CliError> {
        Ok(match modality {
            Modality::Counts => Dataset::Counts(load_bow(path).map_err(config_err)?),
            Modality::Binary => Dataset::Binary(load_binary(path).map_err(config_err)?),
            Modality::Multilabel => {
                let (features, labels) = load_multilabel(path).map_err(config_err)?;
                Dataset::Multilabel { features, labels }
            }
        })
    }

    pub fn y(&self) -> &SparseCountMatrix {
        match self {
            Dataset::Counts(m) => m,
            Dataset::Binary(b) | Dataset::Multilabel { labels: b, .. } => b.as_counts(),
        }
    }

    pub fn features(&self) -> Option<&FeatureMatrix> {
        match self {
            Dataset::Multilabel { features, .. } => Some(features),
            _ => None,
        }
    }

    fn modality(&self) -> Modality {
        match self {
            Dataset::Counts(_) => Modality::Counts,
            Dataset::Binary(_) => Modality::Binary,
            Dataset::Multilabel { .. } => Modality::Multilabel,
        }
    }
}

fn dataset_identity(path: &Path, rows: usize) -> Result<DatasetIdentity, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(DatasetIdentity {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        rows,
    })
}

fn check_dims(model: &Model, data: &Dataset, what: &str) -> Result<(), CliError> {
    if data.y().n_cols() != model.config.input_dim {
        return Err(CliError::Config(format!(
            "{what} has {} columns, checkpoint expects {}",
            data.y().n_cols(),
            model.config.input_dim
        )));
    }
    if let (Some(x), Some(d)) = (data.features(), model.config.feature_dim) {
        if x.n_dims() != d {
            return Err(CliError::Config(format!(
                "{what} has {} features, checkpoint expects {d}",
                x.n_dims()
            )));
        }
    }
    Ok(())
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::UnknownMetric(_) | EvalError::Contract(_) | EvalError::Data(_) => {
            CliError::Config(e.to_string())
        }
        EvalError::Model(ModelError::Diff(_)) => CliError::Numeric(e.to_string()),
        other => CliError::Check(other.to_string()),
    }
}

/// Computes every requested metric of `model` on `data`.
pub fn evaluate_dataset(
    model: &Model,
    data: &Dataset,
    eval: &EvalSection,
    dataset: DatasetIdentity,
    checkpoint: String,
) -> Result<EvalReport, CliError> {
    let started = Instant::now();
    let mut metrics = std::collections::BTreeMap::new();
    let kinds = eval
        .metrics
        .iter()
        .map(|m| MetricKind::parse(m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(eval_error)?;
    let r = &eval.r_values;
    match data {
        Dataset::Counts(m) => {
            if kinds.contains(&MetricKind::Perplexity) {
                let p = perplexity(model, m, eval.heldout_fraction, eval.split_seed)
                    .map_err(eval_error)?;
                metrics.insert(MetricKind::Perplexity.key(None), p);
            }
        }
        Dataset::Binary(b) => {
            let f =
                fold_in(model, b, eval.heldout_fraction, eval.split_seed, r).map_err(eval_error)?;
            for (i, &cut) in r.iter().enumerate() {
                if kinds.contains(&MetricKind::Recall) {
                    metrics.insert(MetricKind::Recall.key(Some(cut)), f.recall[i]);
                }
                if kinds.contains(&MetricKind::Ndcg) {
                    metrics.insert(MetricKind::Ndcg.key(Some(cut)), f.ndcg[i]);
                }
            }
        }
        Dataset::Multilabel { features, labels } => {
            let p = label_precision(model, features, labels, r).map_err(eval_error)?;
            for (&cut, v) in r.iter().zip(p) {
                metrics.insert(MetricKind::Precision.key(Some(cut)), v);
            }
        }
    }
    let report = EvalReport {
        metrics,
        r_values: r.clone(),
        dataset,
        checkpoint,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    if !report.all_finite() {
        return Err(CliError::Numeric(format!(
            "non-finite metric in {:?}",
            report.metrics
        )));
    }
    Ok(report)
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, report.to_json()).map_err(io_err(&path))?;
    let timing = dir.join(TIMING_FILE);
    let text = format!(
        "{{\n  \"evaluation_seconds\": {}\n}}\n",
        report.wall_clock_seconds
    );
    fs::write(&timing, text).map_err(io_err(&timing))
}

fn print_metrics(report: &EvalReport) {
    println!("{:<16} {:>14}", "metric", "value");
    for (k, v) in &report.metrics {
        println!("{k:<16} {v:>14.6}");
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "nbvae",
    version,
    about = "Negative-binomial VAEs for sparse counts and binary data"
)]
pub struct Cli {
    /// Worker threads for evaluation (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate data files and write the held-out split, or generate a synthetic dataset.
    Prepare(PrepareArgs),
    /// Train a model and write its checkpoint, history and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Evaluate(EvaluateArgs),
    /// Write per-row item or label scores.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SyntheticKind {
    NbMixture,
    Bursty,
    Implicit,
    Multilabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub synthetic: Option<SyntheticKind>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Validation)]
    pub split: Split,
    /// Overrides the held-out split seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, e.g. when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn load_resolved(path: &Path) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.resolve()?;
    Ok(cfg)
}

fn split_path(cfg: &RunConfig, split: Split) -> Result<&Path, CliError> {
    let (field, p) = match split {
        Split::Train => ("data.train", Some(&cfg.data.train)),
        Split::Validation => ("data.validation", cfg.data.validation.as_ref()),
        Split::Test => ("data.test", cfg.data.test.as_ref()),
    };
    p.map(PathBuf::as_path)
        .ok_or_else(|| CliError::Config(format!("{field} is not set")))
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_resolved(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = std::path::absolute(out).unwrap_or_else(|_| out.clone());
    }
    let modality = cfg.data.modality;
    let train_data = Dataset::load(modality, &cfg.data.train)?;
    let validation = cfg
        .data
        .validation
        .as_deref()
        .map(|p| Dataset::load(modality, p))
        .transpose()?;

    let model_config = cfg.model_config(
        train_data.y().n_cols(),
        train_data.features().map(FeatureMatrix::n_dims),
    )?;
    cfg.model.input_dim = Some(model_config.input_dim);
    cfg.model.feature_dim = model_config.feature_dim;
    let model = Model::new(model_config).map_err(config_err)?;
    if let Some(v) = &validation {
        check_dims(&model, v, "data.validation")?;
    }

    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, cfg.to_json()).map_err(io_err(&resolved))?;

    let validation_spec = validation.as_ref().map(|v| match v {
        Dataset::Counts(m) => Validation::Elbo(m),
        Dataset::Binary(b) => Validation::Ndcg {
            data: b,
            fraction: cfg.eval.heldout_fraction,
            seed: cfg.eval.split_seed,
            r: 10,
        },
        Dataset::Multilabel { features, labels } => Validation::PrecisionAt1 { features, labels },
    });
    let data = TrainData {
        modality,
        y: train_data.y(),
        x: train_data.features(),
    };
    let started = Instant::now();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let history_path = out.join(HISTORY_FILE);
    let outcome = match train(model, &cfg.train, data, validation_spec) {
        Ok(o) => o,
        Err(TrainError::NonFinite {
            what,
            step,
            last_good,
            history,
        }) => {
            save_checkpoint(&last_good.model, &ckpt_dir)
                .map_err(|e| CliError::Check(e.to_string()))?;
            write_history(&history, &history_path).map_err(io_err(&history_path))?;
            return Err(CliError::Numeric(format!(
                "non-finite {what} at step {step}; last good checkpoint kept in {}",
                ckpt_dir.display()
            )));
        }
        Err(e @ (TrainError::Config(_) | TrainError::Contract(_))) => return Err(config_err(e)),
        Err(e) => return Err(CliError::Numeric(e.to_string())),
    };
    let train_seconds = started.elapsed().as_secs_f64();
    let model = outcome.state.model;
    save_checkpoint(&model, &ckpt_dir).map_err(|e| CliError::Check(e.to_string()))?;
    write_history(&outcome.history, &history_path).map_err(io_err(&history_path))?;
    let digest = checkpoint_digest(&ckpt_dir).map_err(|e| CliError::Check(e.to_string()))?;

    let (report_data, report_path) = match &validation {
        Some(v) => (v, cfg.data.validation.as_deref().expect("validation path")),
        None => (&train_data, cfg.data.train.as_path()),
    };
    let identity = dataset_identity(report_path, report_data.y().n_rows())?;
    let report = evaluate_dataset(&model, report_data, &cfg.eval, identity, digest)?;
    write_report(&report, &out)?;
    let timing = out.join(TIMING_FILE);
    let text = format!(
        "{{\n  \"train_seconds\": {train_seconds},\n  \"evaluation_seconds\": {}\n}}\n",
        report.wall_clock_seconds
    );
    fs::write(&timing, text).map_err(io_err(&timing))?;
    println!(
        "trained {} for {} epochs ({} steps{})",
        model.variant(),
        outcome.state.epoch,
        outcome.state.global_step,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    print_metrics(&report);
    Ok(())
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = load_resolved(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.eval.split_seed = seed;
    }
    let model = load_checkpoint(&args.checkpoint).map_err(config_err)?;
    if model.variant() != cfg.model.variant {
        return Err(CliError::Config(format!(
            "checkpoint holds {} but model.variant is {}",
            model.variant(),
            cfg.model.variant
        )));
    }
    let path = split_path(&cfg, args.split)?.to_path_buf();
    let data = Dataset::load(cfg.data.modality, &path)?;
    check_dims(&model, &data, "evaluation data")?;
    let digest = checkpoint_digest(&args.checkpoint).map_err(|e| CliError::Check(e.to_string()))?;
    let identity = dataset_identity(&path, data.y().n_rows())?;
    let report = evaluate_dataset(&model, &data, &cfg.eval, identity, digest)?;
    let out = args.out.unwrap_or_else(|| cfg.output_dir.join("evaluate"));
    write_report(&report, &out)?;
    print_metrics(&report);
    Ok(())
}

#[derive(Serialize)]
struct Scored {
    index: usize,
    score: f64,
}

#[derive(Serialize)]
struct PredictionRow {
    row: usize,
    top: Vec<Scored>,
}

pub fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let cfg = load_resolved(&args.config)?;
    let model = load_checkpoint(&args.checkpoint).map_err(config_err)?;
    let path = split_path(&cfg, args.split)?.to_path_buf();
    let data = Dataset::load(cfg.data.modality, &path)?;
    check_dims(&model, &data, "prediction data")?;
    let r = cfg.eval.r_values.iter().copied().max().unwrap_or(10);
    let scores = match &data {
        Dataset::Multilabel { features, .. } => {
            let mut x = ndarray::Array2::zeros((features.n_rows(), features.n_dims()));
            for j in 0..features.n_rows() {
                let (idx, val) = features.row(j);
                for (&c, &v) in idx.iter().zip(val) {
                    x[[j, c as usize]] = v;
                }
            }
            score_labels_batch(&model, &x).map_err(eval_error)?
        }
        _ => score_items(&model, data.y()).map_err(eval_error)?,
    };
    let mut out = String::new();
    for (j, s) in scores.iter().enumerate() {
        // Items already present in a binary row are not recommended again.
        let exclude: &[u32] = match data.modality() {
            Modality::Binary => data.y().row(j).0,
            _ => &[],
        };
        let row = PredictionRow {
            row: j,
            top: top_r(s, exclude, r)
                .into_iter()
                .map(|index| Scored {
                    index,
                    score: s[index],
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&row).expect("row serializes"));
        out.push('\n');
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&args.out, out).map_err(io_err(&args.out))?;
    println!("wrote {} rows to {}", scores.len(), args.out.display());
    Ok(())
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let report = run_suite(&GradcheckOptions {
        seeds: args.seeds,
        inject_fault: args.inject_fault,
    })
    .map_err(config_err)?;
    print!("{report}");
    if report.passed() {
        println!(
            "all {} checks passed over {} seeds",
            report.checks.len(),
            args.seeds
        );
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        Err(CliError::Check(format!(
            "gradient check failed for: {}",
            names.join(", ")
        )))
    }
}

/// Row split used for synthetic datasets: 80% train, 10% validation, 10% test.
fn three_way(n: usize) -> [Vec<usize>; 3] {
    let a = n * 8 / 10;
    let b = n * 9 / 10;
    [(0..a).collect(), (a..b).collect(), (b..n).collect()]
}

fn write_synthetic(kind: SyntheticKind, seed: u64, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let names = ["train.txt", "validation.txt", "test.txt"];
    let write_counts = |m: &SparseCountMatrix| -> Result<(), CliError> {
        for (rows, name) in three_way(m.n_rows()).iter().zip(names) {
            let p = out.join(name);
            save_bow(&m.select_rows(rows), &p).map_err(|e| CliError::Check(e.to_string()))?;
        }
        Ok(())
    };
    let (variant, modality, train) = match kind {
        SyntheticKind::NbMixture => {
            write_counts(&nb_mixture_corpus(NbMixtureSpec::default(), seed))?;
            (
                Variant::Nbvae,
                Modality::Counts,
                TrainConfig {
                    batch_size: 50,
                    max_epochs: 20,
                    anneal_steps: 80,
                    ..TrainConfig::default()
                },
            )
        }
        SyntheticKind::Bursty => {
            write_counts(&bursty_corpus(BurstySpec::default(), seed))?;
            (
                Variant::Nbvae,
                Modality::Counts,
                TrainConfig {
                    batch_size: 100,
                    max_epochs: 30,
                    learning_rate: 3e-3,
                    anneal_steps: 200,
                    ..TrainConfig::default()
                },
            )
        }
        SyntheticKind::Implicit => {
            write_counts(implicit_feedback(ImplicitSpec::default(), seed).as_counts())?;
            (
                Variant::NbvaeB,
                Modality::Binary,
                TrainConfig {
                    batch_size: 100,
                    max_epochs: 40,
                    learning_rate: 3e-3,
                    beta_max: 0.2,
                    anneal_steps: 300,
                    ..TrainConfig::default()
                },
            )
        }
        SyntheticKind::Multilabel => {
            let (x, y) = planted_multilabel(MultilabelSpec::default(), seed);
            for (rows, name) in three_way(x.n_rows()).iter().zip(names) {
                let p = out.join(name);
                save_multilabel(&x.select_rows(rows), &y.select_rows(rows), &p)
                    .map_err(|e| CliError::Check(e.to_string()))?;
            }
            (
                Variant::NbvaeC,
                Modality::Multilabel,
                TrainConfig {
                    batch_size: 100,
                    max_epochs: 30,
                    learning_rate: 3e-3,
                    anneal_steps: 500,
                    ..TrainConfig::default()
                },
            )
        }
    };
    let cfg = RunConfig {
        model: ModelSection {
            variant,
            latent_dim: if modality == Modality::Counts { 16 } else { 32 },
            encoder_layers: default_encoder_layers(),
            decoder_layers: default_decoder_layers(),
            input_dim: None,
            feature_dim: None,
            ablate_feature_encoder: false,
            seed,
        },
        train: TrainConfig { seed, ..train },
        data: DataSection {
            modality,
            train: names[0].into(),
            validation: Some(names[1].into()),
            test: Some(names[2].into()),
        },
        eval: EvalSection::default(),
        output_dir: default_output_dir(),
    };
    let path = out.join("config.json");
    fs::write(&path, cfg.to_json()).map_err(io_err(&path))?;
    println!(
        "wrote {} dataset and config.json to {}",
        modality_name(modality),
        out.display()
    );
    Ok(())
}

pub fn cmd_prepare(args: PrepareArgs) -> Result<(), CliError> {
    if let Some(kind) = args.synthetic {
        let out = args
            .out
            .ok_or_else(|| CliError::Config("--out is required with --synthetic".into()))?;
        return write_synthetic(kind, args.seed, &out);
    }
    let cfg = load_resolved(args.config.as_deref().expect("clap enforces --config"))?;
    let modality = cfg.data.modality;
    let train_data = Dataset::load(modality, &cfg.data.train)?;
    let model_config = cfg.model_config(
        train_data.y().n_cols(),
        train_data.features().map(FeatureMatrix::n_dims),
    )?;
    let probe = Model::new(model_config).map_err(config_err)?;
    println!(
        "data.train: {} rows, {} columns, {} nonzeros",
        train_data.y().n_rows(),
        train_data.y().n_cols(),
        train_data.y().nnz()
    );
    let out = args.out.unwrap_or_else(|| cfg.output_dir.join("prepared"));
    for (field, path) in [
        ("validation", &cfg.data.validation),
        ("test", &cfg.data.test),
    ] {
        let Some(path) = path else { continue };
        let data = Dataset::load(modality, path)?;
        check_dims(&probe, &data, &format!("data.{field}"))?;
        println!("data.{field}: {} rows", data.y().n_rows());
        if modality == Modality::Multilabel {
            continue;
        }
        let split = split_heldout(data.y(), cfg.eval.heldout_fraction, cfg.eval.split_seed)
            .map_err(config_err)?;
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        for (part, m) in [("observed", &split.observed), ("heldout", &split.heldout)] {
            let p = out.join(format!("{field}.{part}.txt"));
            save_bow(m, &p).map_err(|e| CliError::Check(e.to_string()))?;
        }
    }
    Ok(())
}
