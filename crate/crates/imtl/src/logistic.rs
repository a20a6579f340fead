//! L1-penalized logistic regression for the supervised stage, plus
//! prediction metrics and grid-search tuning.
//!
//! Solver: cyclic coordinate descent on the iteratively reweighted quadratic
//! approximation of the negative log-likelihood (the glmnet scheme). The
//! intercept is unpenalized and features are standardized internally on the
//! training set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticOptions {
    pub max_irls: usize,
    pub max_cd_sweeps: usize,
    /// Stop when no coefficient moves more than this in one sweep.
    pub tol: f64,
    pub kkt_tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_irls: 200,
            max_cd_sweeps: 1000,
            tol: 1e-10,
            kkt_tol: 1e-6,
        }
    }
}

/// Fitted sparse logistic model. Coefficients refer to standardized
/// features; `means`/`scales` hold the training standardization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticModel {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub lambda_beta: f64,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl LogisticModel {
    pub fn n_features(&self) -> usize {
        self.beta.len()
    }

    pub fn n_nonzero(&self) -> usize {
        self.beta.iter().filter(|&&b| b != 0.0).count()
    }
}

fn standardize(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut z = x.clone();
    let mut means = Vec::with_capacity(x.ncols());
    let mut scales = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let mean = x.column(j).sum() / n;
        let var = x.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        means.push(mean);
        scales.push(scale);
        for i in 0..x.nrows() {
            z[(i, j)] = (x[(i, j)] - mean) / scale;
        }
    }
    (z, means, scales)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Minimizes `(1/N) sum -loglik + lambda_beta * ||beta||_1` over the
/// coefficients and the unpenalized intercept. Deterministic.
pub fn fit_l1_logistic(
    x: &DMatrix<f64>,
    y: &[u8],
    lambda_beta: f64,
    opts: &LogisticOptions,
) -> Result<LogisticModel> {
    let n = x.nrows();
    let p = x.ncols();
    if n != y.len() {
        return Err(Error::ShapeMismatch("row count != label count".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    if lambda_beta < 0.0 {
        return Err(Error::InvalidArgument("lambda_beta must be non-negative".into()));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("labels must be 0/1".into()));
    }
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::DegenerateLabels);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features contain non-finite values".into()));
    }

    let (z, means, scales) = standardize(x);
    let nf = n as f64;
    let ybar = y.iter().map(|&v| v as f64).sum::<f64>() / nf;
    let mut beta = DVector::zeros(p);
    let mut intercept = (ybar / (1.0 - ybar)).ln();

    for _ in 0..opts.max_irls {
        // quadratic approximation at the current iterate
        let eta = &z * &beta + DVector::from_element(n, intercept);
        let mut weights = DVector::zeros(n);
        let mut working = DVector::zeros(n);
        for i in 0..n {
            let pr = sigmoid(eta[i]);
            let w = (pr * (1.0 - pr)).max(1e-6);
            weights[i] = w;
            working[i] = eta[i] + (y[i] as f64 - pr) / w;
        }
        let wsum = weights.sum();
        let wzz: Vec<f64> = (0..p)
            .map(|j| {
                z.column(j)
                    .iter()
                    .zip(weights.iter())
                    .map(|(v, w)| w * v * v)
                    .sum::<f64>()
                    / nf
            })
            .collect();

        // coordinate descent on the weighted least-squares problem
        let mut resid = working - &eta;
        let mut outer_change = 0.0f64;
        for sweep in 0..opts.max_cd_sweeps {
            let mut change = 0.0f64;
            for j in 0..p {
                let old = beta[j];
                let grad = z
                    .column(j)
                    .iter()
                    .zip(weights.iter())
                    .zip(resid.iter())
                    .map(|((v, w), r)| w * v * r)
                    .sum::<f64>()
                    / nf;
                let new = soft_threshold(grad + wzz[j] * old, lambda_beta) / wzz[j].max(1e-12);
                if new != old {
                    let delta = new - old;
                    for i in 0..n {
                        resid[i] -= delta * z[(i, j)];
                    }
                    beta[j] = new;
                    change = change.max(delta.abs());
                }
            }
            let dot = weights
                .iter()
                .zip(resid.iter())
                .map(|(w, r)| w * r)
                .sum::<f64>();
            let dint = dot / wsum;
            if dint != 0.0 {
                intercept += dint;
                for i in 0..n {
                    resid[i] -= dint;
                }
                change = change.max(dint.abs());
            }
            if sweep == 0 {
                outer_change = change;
            } else {
                outer_change = outer_change.max(change);
            }
            if change <= opts.tol {
                break;
            }
        }
        if outer_change <= opts.tol * 10.0 {
            break;
        }
    }

    Ok(LogisticModel {
        beta: beta.as_slice().to_vec(),
        intercept,
        lambda_beta,
        means,
        scales,
    })
}

/// Gradient of the (unpenalized) mean negative log-likelihood at the model's
/// solution, on standardized features; used for KKT verification.
pub fn score_at_solution(model: &LogisticModel, x: &DMatrix<f64>, y: &[u8]) -> Result<DVector<f64>> {
    if x.ncols() != model.n_features() || x.nrows() != y.len() {
        return Err(Error::ShapeMismatch("feature dims mismatch".into()));
    }
    let n = x.nrows();
    let nf = n as f64;
    let mut score = DVector::zeros(x.ncols());
    for i in 0..n {
        let mut eta = model.intercept;
        for j in 0..x.ncols() {
            eta += (x[(i, j)] - model.means[j]) / model.scales[j] * model.beta[j];
        }
        let res = y[i] as f64 - sigmoid(eta);
        for j in 0..x.ncols() {
            score[j] += (x[(i, j)] - model.means[j]) / model.scales[j] * res / nf;
        }
    }
    Ok(score)
}

/// Predicted probabilities and 0/1 labels (threshold 0.5).
pub fn predict(model: &LogisticModel, x: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<u8>)> {
    if x.ncols() != model.n_features() {
        return Err(Error::ShapeMismatch(format!(
            "{} features, model expects {}",
            x.ncols(),
            model.n_features()
        )));
    }
    let mut probs = Vec::with_capacity(x.nrows());
    let mut labels = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let mut eta = model.intercept;
        for j in 0..x.ncols() {
            eta += (x[(i, j)] - model.means[j]) / model.scales[j] * model.beta[j];
        }
        let p = sigmoid(eta);
        probs.push(p);
        labels.push(u8::from(p > 0.5));
    }
    Ok((probs, labels))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Accuracy, sensitivity and specificity. A class absent from the truth
/// yields a vacuous rate of 1 for its conditional metric.
pub fn metrics(y_true: &[u8], y_pred: &[u8]) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch("prediction length mismatch".into()));
    }
    if y_true.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (0, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / y_true.len() as f64,
        sensitivity: rate(tp, tp + fn_),
        specificity: rate(tn, tn + fp),
        tp,
        fp,
        tn,
        fn_,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TuneResult {
    pub rank: usize,
    pub lambda_s: f64,
    pub lambda_beta: f64,
    pub validation_error: f64,
}

/// Exhaustive grid search minimizing the validation error returned by the
/// callback. Ties prefer smaller rank, then smaller `lambda_s`, then larger
/// `lambda_beta`.
pub fn tune<F>(
    r_grid: &[usize],
    lambda_s_grid: &[f64],
    lambda_beta_grid: &[f64],
    mut eval: F,
) -> Result<TuneResult>
where
    F: FnMut(usize, f64, f64) -> Result<f64>,
{
    if r_grid.is_empty() || lambda_s_grid.is_empty() || lambda_beta_grid.is_empty() {
        return Err(Error::Config("tuning grids must be non-empty".into()));
    }
    let mut rs = r_grid.to_vec();
    rs.sort_unstable();
    let mut lss = lambda_s_grid.to_vec();
    lss.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut lbs = lambda_beta_grid.to_vec();
    lbs.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut best: Option<TuneResult> = None;
    for &r in &rs {
        for &ls in &lss {
            for &lb in &lbs {
                let err = eval(r, ls, lb)?;
                if best.as_ref().map_or(true, |b| err < b.validation_error) {
                    best = Some(TuneResult {
                        rank: r,
                        lambda_s: ls,
                        lambda_beta: lb,
                        validation_error: err,
                    });
                }
            }
        }
    }
    Ok(best.expect("non-empty grids"))
}
