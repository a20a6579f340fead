//! End-to-end benchmark harness: generate or load data, fit the
//! decomposition, tune on the validation set, evaluate on the test set,
//! replicate, and aggregate into a CSV summary.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MultimodalDataset;
use crate::error::{Error, Result};
use crate::hocpd::{fit_hocpd, HocpdModel, HocpdOptions};
use crate::logistic::{self, LogisticOptions, Metrics};
use crate::multilayer::{self, FitOptions, MultilayerModel};
use crate::simulate::{self, SimConfig};
use crate::tensor::{kr_chain, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Imtl,
    Hocpd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Imtl => write!(f, "imtl"),
            Method::Hocpd => write!(f, "hocpd"),
        }
    }
}

/// Paths of pre-generated train/validation/test dataset directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataDirs {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Synthetic-data settings; ignored when `data_dirs` is set.
    pub sim: SimConfig,
    pub data_dirs: Option<DataDirs>,
    pub r_grid: Vec<usize>,
    pub lambda_s_grid: Vec<f64>,
    pub lambda_beta_grid: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    /// Fit the decomposition on all images including the unlabeled
    /// validation/test subjects. When false, fit on the training images only
    /// and project held-out subjects onto the fitted bases.
    pub transductive: bool,
    pub fit: FitOptions,
    pub hocpd: HocpdOptions,
    pub logistic: LogisticOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Imtl,
            sim: SimConfig::default(),
            data_dirs: None,
            r_grid: vec![4],
            lambda_s_grid: vec![1.0],
            lambda_beta_grid: vec![0.02, 0.08, 0.2],
            replications: 20,
            seed: 0,
            workers: 0,
            transductive: true,
            fit: FitOptions::default(),
            hocpd: HocpdOptions::default(),
            logistic: LogisticOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.r_grid.is_empty() || self.lambda_s_grid.is_empty() || self.lambda_beta_grid.is_empty()
        {
            return Err(Error::Config("tuning grids must be non-empty".into()));
        }
        if self.data_dirs.is_none() {
            self.sim.validate()?;
        }
        Ok(())
    }
}

/// One replication's selected parameters and test metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub method: Method,
    pub rank: usize,
    pub lambda_s: f64,
    pub lambda_beta: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ReplicationRow>,
    pub accuracy: MetricSummary,
    pub sensitivity: MetricSummary,
    pub specificity: MetricSummary,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    MetricSummary {
        mean,
        standard_error: se,
    }
}

impl ExperimentResult {
    pub fn to_csv_string(&self) -> String {
        let mut out =
            String::from("replication,method,R,lambda_s,lambda_beta,accuracy,sensitivity,specificity\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.replication,
                row.method,
                row.rank,
                row.lambda_s,
                row.lambda_beta,
                row.metrics.accuracy,
                row.metrics.sensitivity,
                row.metrics.specificity
            ));
        }
        out
    }
}

struct Split {
    train: MultimodalDataset,
    validation: MultimodalDataset,
    test: MultimodalDataset,
}

impl Split {
    fn counts(&self) -> (usize, usize, usize) {
        (
            self.train.n_subjects(),
            self.validation.n_subjects(),
            self.test.n_subjects(),
        )
    }
}

fn feature_matrix(rows: Vec<DVector<f64>>) -> DMatrix<f64> {
    let p = rows.first().map_or(0, DVector::len);
    let mut m = DMatrix::zeros(rows.len(), p);
    for (i, r) in rows.into_iter().enumerate() {
        m.row_mut(i).copy_from(&r.transpose());
    }
    m
}

/// Features for every subject of the three splits under one decomposition
/// parameter point.
fn imtl_features(
    split: &Split,
    rank: usize,
    lambda_s: f64,
    opts: &FitOptions,
    transductive: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (nt, nv, ns) = split.counts();
    if transductive {
        let mut full = MultimodalDataset::concat(&[&split.train, &split.validation, &split.test])?;
        full.set_labels(None)?;
        let (model, _) = multilayer::fit(&full, rank, lambda_s, opts)?;
        let rows: Vec<DVector<f64>> = (0..nt + nv + ns)
            .map(|i| model.extract_features(i).map(|f| f.to_vec()))
            .collect::<Result<_>>()?;
        let mut it = rows.into_iter();
        let train: Vec<_> = it.by_ref().take(nt).collect();
        let validation: Vec<_> = it.by_ref().take(nv).collect();
        let test: Vec<_> = it.collect();
        Ok((
            feature_matrix(train),
            feature_matrix(validation),
            feature_matrix(test),
        ))
    } else {
        let (model, _) = multilayer::fit(&split.train, rank, lambda_s, opts)?;
        let train: Vec<DVector<f64>> = (0..nt)
            .map(|i| model.extract_features(i).map(|f| f.to_vec()))
            .collect::<Result<_>>()?;
        let project = |data: &MultimodalDataset| -> Result<Vec<DVector<f64>>> {
            (0..data.n_subjects())
                .map(|i| {
                    model
                        .fit_new_subject(&data.subject_images(i)?)
                        .map(|f| f.to_vec())
                })
                .collect()
        };
        Ok((
            feature_matrix(train),
            feature_matrix(project(&split.validation)?),
            feature_matrix(project(&split.test)?),
        ))
    }
}

/// Least-squares loading row of a held-out subject on a fitted homogeneous
/// model (feature-mode and modality factors fixed).
fn hocpd_project(model: &HocpdModel, images: &[DenseTensor]) -> Result<DVector<f64>> {
    let chain = kr_chain(&model.factors);
    let mut x = DVector::zeros(chain.nrows());
    let per = images.first().map_or(0, DenseTensor::len);
    if per * images.len() != chain.nrows() {
        return Err(Error::ShapeMismatch("projection image sizes mismatch".into()));
    }
    for (k, img) in images.iter().enumerate() {
        x.rows_mut(k * per, per).copy_from(&img.vectorize());
    }
    let gram = chain.transpose() * &chain;
    let rhs = chain.transpose() * x;
    let chol = crate::linalg::ridge_cholesky(&gram)?;
    Ok(chol.solve(&rhs))
}

fn hocpd_features(
    split: &Split,
    rank: usize,
    opts: &HocpdOptions,
    transductive: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (nt, nv, ns) = split.counts();
    if transductive {
        let full = MultimodalDataset::concat(&[&split.train, &split.validation, &split.test])?;
        let x = full.integrated_tensor()?;
        let (model, _) = fit_hocpd(&x, rank, opts)?;
        let rows: Vec<DVector<f64>> = (0..nt + nv + ns)
            .map(|i| model.w.row(i).transpose())
            .collect();
        let mut it = rows.into_iter();
        let train: Vec<_> = it.by_ref().take(nt).collect();
        let validation: Vec<_> = it.by_ref().take(nv).collect();
        let test: Vec<_> = it.collect();
        Ok((
            feature_matrix(train),
            feature_matrix(validation),
            feature_matrix(test),
        ))
    } else {
        let x = split.train.integrated_tensor()?;
        let (model, _) = fit_hocpd(&x, rank, opts)?;
        let train: Vec<DVector<f64>> = (0..nt).map(|i| model.w.row(i).transpose()).collect();
        let project = |data: &MultimodalDataset| -> Result<Vec<DVector<f64>>> {
            (0..data.n_subjects())
                .map(|i| hocpd_project(&model, &data.subject_images(i)?))
                .collect()
        };
        Ok((
            feature_matrix(train),
            feature_matrix(project(&split.validation)?),
            feature_matrix(project(&split.test)?),
        ))
    }
}

fn run_replication(cfg: &ExperimentConfig, split: &Split, k: usize) -> Result<ReplicationRow> {
    let y_train = split
        .train
        .labels()
        .ok_or_else(|| Error::InvalidArgument("training set has no labels".into()))?
        .to_vec();
    let y_val = split
        .validation
        .labels()
        .ok_or_else(|| Error::InvalidArgument("validation set has no labels".into()))?
        .to_vec();
    let y_test = split
        .test
        .labels()
        .ok_or_else(|| Error::InvalidArgument("test set has no labels".into()))?
        .to_vec();

    let mut fit_opts = cfg.fit.clone();
    fit_opts.seed = cfg.seed.wrapping_add(k as u64);
    let mut hocpd_opts = cfg.hocpd.clone();
    hocpd_opts.seed = cfg.seed.wrapping_add(k as u64);

    // one decomposition per (R, lambda_s), reused across the lambda_beta leg
    type Feats = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);
    let mut cache: HashMap<(usize, u64), Feats> = HashMap::new();
    let lambda_s_grid: Vec<f64> = match cfg.method {
        Method::Imtl => cfg.lambda_s_grid.clone(),
        // the homogeneous baseline has no orthogonality penalty
        Method::Hocpd => vec![0.0],
    };
    let mut features = |rank: usize, ls: f64| -> Result<Feats> {
        let key = (rank, ls.to_bits());
        if !cache.contains_key(&key) {
            let f = match cfg.method {
                Method::Imtl => imtl_features(split, rank, ls, &fit_opts, cfg.transductive)?,
                Method::Hocpd => hocpd_features(split, rank, &hocpd_opts, cfg.transductive)?,
            };
            cache.insert(key, f);
        }
        Ok(cache[&key].clone())
    };

    let choice = logistic::tune(&cfg.r_grid, &lambda_s_grid, &cfg.lambda_beta_grid, |r, ls, lb| {
        let (ftr, fva, _) = features(r, ls)?;
        let model = logistic::fit_l1_logistic(&ftr, &y_train, lb, &cfg.logistic)?;
        let (_, pred) = logistic::predict(&model, &fva)?;
        let m = logistic::metrics(&y_val, &pred)?;
        Ok(1.0 - m.accuracy)
    })?;

    let (ftr, _, fte) = features(choice.rank, choice.lambda_s)?;
    let model = logistic::fit_l1_logistic(&ftr, &y_train, choice.lambda_beta, &cfg.logistic)?;
    let (_, pred) = logistic::predict(&model, &fte)?;
    let metrics = logistic::metrics(&y_test, &pred)?;
    Ok(ReplicationRow {
        replication: k,
        method: cfg.method,
        rank: choice.rank,
        lambda_s: choice.lambda_s,
        lambda_beta: choice.lambda_beta,
        metrics,
    })
}

fn load_split(cfg: &ExperimentConfig, k: usize) -> Result<Split> {
    match &cfg.data_dirs {
        Some(dirs) => Ok(Split {
            train: MultimodalDataset::load_dir(&dirs.train)?,
            validation: MultimodalDataset::load_dir(&dirs.validation)?,
            test: MultimodalDataset::load_dir(&dirs.test)?,
        }),
        None => {
            let mut sim = cfg.sim.clone();
            sim.seed = cfg.seed.wrapping_add(k as u64);
            let (train, validation, test) = simulate::generate(&sim)?;
            Ok(Split {
                train,
                validation,
                test,
            })
        }
    }
}

/// Runs all replications (concurrently up to the worker count) and
/// aggregates the test metrics. Output is independent of the worker count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let run_all = || -> Result<Vec<ReplicationRow>> {
        (0..cfg.replications)
            .into_par_iter()
            .map(|k| {
                let split = load_split(cfg, k)?;
                run_replication(cfg, &split, k)
            })
            .collect()
    };
    let rows = if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(run_all)?
    } else {
        run_all()?
    };

    let acc: Vec<f64> = rows.iter().map(|r| r.metrics.accuracy).collect();
    let sen: Vec<f64> = rows.iter().map(|r| r.metrics.sensitivity).collect();
    let spe: Vec<f64> = rows.iter().map(|r| r.metrics.specificity).collect();
    Ok(ExperimentResult {
        accuracy: summarize(&acc),
        sensitivity: summarize(&sen),
        specificity: summarize(&spe),
        rows,
    })
}

/// Single-split convenience used by the command-line `fit`/`predict` path:
/// fit the decomposition and classifier at fixed parameters.
pub struct FittedPipeline {
    pub tensor_model: MultilayerModel,
    pub classifier: logistic::LogisticModel,
}

pub fn fit_pipeline(
    train: &MultimodalDataset,
    rank: usize,
    lambda_s: f64,
    lambda_beta: f64,
    fit_opts: &FitOptions,
    logistic_opts: &LogisticOptions,
) -> Result<FittedPipeline> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::InvalidArgument("training set has no labels".into()))?
        .to_vec();
    let (model, _) = multilayer::fit(train, rank, lambda_s, fit_opts)?;
    let rows: Vec<DVector<f64>> = (0..train.n_subjects())
        .map(|i| model.extract_features(i).map(|f| f.to_vec()))
        .collect::<Result<_>>()?;
    let x = feature_matrix(rows);
    let classifier = logistic::fit_l1_logistic(&x, &labels, lambda_beta, logistic_opts)?;
    Ok(FittedPipeline {
        tensor_model: model,
        classifier,
    })
}

impl FittedPipeline {
    /// Probability and label for held-out subjects.
    pub fn predict(&self, data: &MultimodalDataset) -> Result<(Vec<f64>, Vec<u8>)> {
        let rows: Vec<DVector<f64>> = (0..data.n_subjects())
            .map(|i| {
                self.tensor_model
                    .fit_new_subject(&data.subject_images(i)?)
                    .map(|f| f.to_vec())
            })
            .collect::<Result<_>>()?;
        logistic::predict(&self.classifier, &feature_matrix(rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            sim: SimConfig {
                n_train: 12,
                n_validation: 8,
                n_test: 8,
                d_pix: 8,
                mu_case: 8.0,
                mu_control: 2.0,
                seed: 0,
                ..SimConfig::default()
            },
            r_grid: vec![2],
            lambda_s_grid: vec![1.0],
            lambda_beta_grid: vec![0.05],
            replications: 2,
            seed: 42,
            fit: FitOptions {
                restarts: 1,
                max_outer: 10,
                ..FitOptions::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let mut cfg = tiny_config();
        cfg.workers = 1;
        let a = run_experiment(&cfg).unwrap();
        cfg.workers = 4;
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
    }

    #[test]
    fn csv_schema_is_stable() {
        let mut cfg = tiny_config();
        cfg.replications = 1;
        let res = run_experiment(&cfg).unwrap();
        let csv = res.to_csv_string();
        assert!(csv.starts_with(
            "replication,method,R,lambda_s,lambda_beta,accuracy,sensitivity,specificity\n"
        ));
        assert_eq!(csv.lines().count(), 2);
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("0,imtl,2,1,0.05,"));
    }

    #[test]
    fn hocpd_runs_and_ignores_lambda_s() {
        let mut cfg = tiny_config();
        cfg.method = Method::Hocpd;
        cfg.replications = 1;
        cfg.lambda_s_grid = vec![0.5, 2.0];
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.rows[0].lambda_s, 0.0);
    }

    #[test]
    fn strict_mode_runs() {
        let mut cfg = tiny_config();
        cfg.transductive = false;
        cfg.replications = 1;
        let res = run_experiment(&cfg).unwrap();
        assert!(res.accuracy.mean >= 0.0 && res.accuracy.mean <= 1.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny_config();
        cfg.replications = 0;
        assert!(run_experiment(&cfg).is_err());
        let mut cfg = tiny_config();
        cfg.lambda_beta_grid.clear();
        assert!(run_experiment(&cfg).is_err());
    }
}
