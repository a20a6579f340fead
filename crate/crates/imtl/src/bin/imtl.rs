//! Command-line front end: generate synthetic data, fit the decomposition
//! and classifier, predict held-out subjects, check identifiability, and run
//! replicated benchmark experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use imtl::dataset::MultimodalDataset;
use imtl::error::Error;
use imtl::experiment::{self, ExperimentConfig};
use imtl::identifiability;
use imtl::logistic::{self, LogisticModel, LogisticOptions};
use imtl::multilayer::{FitOptions, MultilayerModel};
use imtl::simulate::{self, SimConfig};

#[derive(Parser)]
#[command(name = "imtl", about = "Individualized multilayer tensor learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (directory or file depending on the command).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = automatic).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation/test datasets into a directory.
    Simulate(Common),
    /// Fit the decomposition and the classifier on a labeled dataset.
    Fit(Common),
    /// Predict labels for a dataset with a fitted model directory.
    Predict(Common),
    /// Check the uniqueness condition of a fitted model.
    Identifiability(Common),
    /// Run a replicated benchmark and write a CSV summary.
    Experiment(Common),
}

/// Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.
fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::Fit(c) => cmd_fit(c),
        Command::Predict(c) => cmd_predict(c),
        Command::Identifiability(c) => cmd_identifiability(c),
        Command::Experiment(c) => cmd_experiment(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn load_config<T: for<'de> Deserialize<'de> + Default>(common: &Common) -> Result<T, CliError> {
    match &common.config {
        None => Ok(T::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
        }
    }
}

fn require_out<'a>(common: &'a Common, what: &str) -> Result<&'a Path, CliError> {
    common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--out is required for {what}")))
}

fn cmd_simulate(common: &Common) -> CliResult {
    let mut cfg: SimConfig = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = require_out(common, "simulate")?;
    let (train, validation, test) = simulate::generate(&cfg)?;
    train.save_dir(out.join("train"))?;
    validation.save_dir(out.join("validation"))?;
    test.save_dir(out.join("test"))?;
    println!(
        "wrote {} train / {} validation / {} test subjects to {}",
        train.n_subjects(),
        validation.n_subjects(),
        test.n_subjects(),
        out.display()
    );
    Ok(())
}

/// Configuration of the `fit` command.
#[derive(Serialize, Deserialize)]
#[serde(default)]
struct FitCommandConfig {
    data_dir: PathBuf,
    rank: usize,
    lambda_s: f64,
    lambda_beta: f64,
    fit: FitOptions,
    logistic: LogisticOptions,
}

impl Default for FitCommandConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data/train"),
            rank: 4,
            lambda_s: 1.0,
            lambda_beta: 0.02,
            fit: FitOptions::default(),
            logistic: LogisticOptions::default(),
        }
    }
}

fn cmd_fit(common: &Common) -> CliResult {
    let mut cfg: FitCommandConfig = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.fit.seed = seed;
    }
    let out = require_out(common, "fit")?;
    let train = MultimodalDataset::load_dir(&cfg.data_dir)?;
    let pipeline = experiment::fit_pipeline(
        &train,
        cfg.rank,
        cfg.lambda_s,
        cfg.lambda_beta,
        &cfg.fit,
        &cfg.logistic,
    )?;
    pipeline.tensor_model.save_dir(out)?;
    fs::write(
        out.join("classifier.json"),
        serde_json::to_string_pretty(&pipeline.classifier).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    println!(
        "fitted rank-{} model on {} subjects; {} nonzero classifier coefficients",
        cfg.rank,
        train.n_subjects(),
        pipeline.classifier.n_nonzero()
    );
    Ok(())
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct PredictCommandConfig {
    model_dir: PathBuf,
    data_dir: PathBuf,
}

fn cmd_predict(common: &Common) -> CliResult {
    let cfg: PredictCommandConfig = load_config(common)?;
    if common.config.is_none() {
        return Err(CliError::Usage("predict requires --config".into()));
    }
    let model = MultilayerModel::load_dir(&cfg.model_dir)?;
    let classifier: LogisticModel = serde_json::from_str(
        &fs::read_to_string(cfg.model_dir.join("classifier.json")).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    let data = MultimodalDataset::load_dir(&cfg.data_dir)?;
    let pipeline = experiment::FittedPipeline {
        tensor_model: model,
        classifier,
    };
    let (probs, labels) = pipeline.predict(&data)?;

    let mut csv = String::from("subject_id,probability,label\n");
    for (i, (p, l)) in probs.iter().zip(&labels).enumerate() {
        csv.push_str(&format!("{i},{p},{l}\n"));
    }
    match &common.out {
        Some(path) => fs::write(path, &csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    if let Some(truth) = data.labels() {
        let m = logistic::metrics(truth, &labels)?;
        eprintln!("{}", serde_json::to_string(&m).map_err(Error::from)?);
    }
    Ok(())
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct IdentifiabilityCommandConfig {
    model_dir: PathBuf,
    /// Subject indices to stack next to the bases; defaults to 0..subset_size.
    subset: Option<Vec<usize>>,
    subset_size: usize,
}

fn cmd_identifiability(common: &Common) -> CliResult {
    let cfg: IdentifiabilityCommandConfig = load_config(common)?;
    if common.config.is_none() {
        return Err(CliError::Usage("identifiability requires --config".into()));
    }
    let model = MultilayerModel::load_dir(&cfg.model_dir)?;
    let subset = cfg.subset.unwrap_or_else(|| {
        let n = cfg.subset_size.max(2).min(model.n_subjects());
        (0..n).collect()
    });
    let report = identifiability::check_identifiability(&model, &subset)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    match &common.out {
        Some(path) => fs::write(path, text).map_err(Error::from)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_experiment(common: &Common) -> CliResult {
    let mut cfg: ExperimentConfig = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.workers > 0 {
        cfg.workers = common.workers;
    }
    let result = experiment::run_experiment(&cfg)?;
    let csv = result.to_csv_string();
    match &common.out {
        Some(path) => fs::write(path, &csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "accuracy {:.3} ({:.3}) sensitivity {:.3} ({:.3}) specificity {:.3} ({:.3})",
        result.accuracy.mean,
        result.accuracy.standard_error,
        result.sensitivity.mean,
        result.sensitivity.standard_error,
        result.specificity.mean,
        result.specificity.standard_error,
    );
    Ok(())
}
