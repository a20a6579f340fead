//! Higher-order CP decomposition (HOCPD) of the subject-aligned tensor.
//!
//! The grand tensor `(N, p_1, ..., p_D)` is factored as `W ∘ B^1 ∘ ... ∘ B^D`
//! by least squares. Each outer sweep solves the subject mode in closed form
//! and then applies one maximum-block-improvement update over the feature
//! modes: every mode's candidate is computed, and only the one with the
//! largest loss reduction is written back.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_unit_factor, ridge_cholesky};
use crate::tensor::{kr_cofactor, DenseTensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HocpdOptions {
    pub max_sweeps: usize,
    /// Stop when the relative objective decrease over one sweep falls below
    /// this value.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for HocpdOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 200,
            tol: 1e-6,
            restarts: 5,
            seed: 0,
        }
    }
}

/// Fitted HOCPD model: subject loadings plus one factor matrix per feature
/// mode. After finalization the factor columns are unit-norm and `w` holds
/// the absorbed loadings.
#[derive(Debug, Clone)]
pub struct HocpdModel {
    pub w: DMatrix<f64>,
    pub factors: Vec<DMatrix<f64>>,
    pub normalized: bool,
}

impl HocpdModel {
    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.w.nrows()
    }

    /// Dense reconstruction of the aligned tensor.
    pub fn reconstruct(&self) -> DenseTensor {
        let mut dims = vec![self.n_subjects()];
        dims.extend(self.factors.iter().map(|f| f.nrows()));
        let co = kr_chain_feature(&self.factors);
        let mat = &self.w * co.transpose();
        DenseTensor::from_matricization(&mat, &dims, 0).expect("consistent dims")
    }
}

#[derive(Debug, Clone, Default)]
pub struct HocpdReport {
    /// Objective after every applied block update.
    pub objective_trace: Vec<f64>,
    /// Feature mode chosen by MBI at each sweep.
    pub chosen_modes: Vec<usize>,
    pub converged: bool,
    pub best_restart: usize,
    pub sweeps: usize,
}

fn kr_chain_feature(factors: &[DMatrix<f64>]) -> DMatrix<f64> {
    crate::tensor::kr_chain(factors)
}

/// Fits a rank-`r` HOCPD to the aligned tensor `x` (subjects on mode 1).
pub fn fit_hocpd(x: &DenseTensor, rank: usize, opts: &HocpdOptions) -> Result<(HocpdModel, HocpdReport)> {
    if x.ndim() < 2 {
        return Err(Error::InvalidArgument(
            "aligned tensor needs a subject mode plus at least one feature mode".into(),
        ));
    }
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if let Some(&p) = x.dims().iter().find(|&&p| p < rank) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} exceeds marginal dimension {p}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("aligned tensor has non-finite values".into()));
    }

    let d_feat = x.ndim() - 1;
    let sqnorm = x.squared_norm();
    // Unfoldings are fixed across the fit.
    let unfold: Vec<DMatrix<f64>> = (0..x.ndim())
        .map(|k| x.matricize(k))
        .collect::<Result<_>>()?;

    let mut best: Option<(HocpdModel, HocpdReport, f64)> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(restart as u64));
        let mut factors: Vec<DMatrix<f64>> = x.dims()[1..]
            .iter()
            .map(|&p| random_unit_factor(&mut rng, p, rank))
            .collect();
        let mut w = DMatrix::zeros(x.dims()[0], rank);

        let mut report = HocpdReport::default();
        let mut prev_obj = f64::INFINITY;
        let mut converged = false;
        for sweep in 0..opts.max_sweeps {
            // Closed-form subject-mode solve.
            let blocks: Vec<DMatrix<f64>> = std::iter::once(w.clone())
                .chain(factors.iter().cloned())
                .collect();
            let co = kr_cofactor(&blocks, 0);
            let gram = co.transpose() * &co;
            let y = &unfold[0] * &co;
            let chol = ridge_cholesky(&gram)?;
            let w_new = chol.solve(&y.transpose()).transpose();
            let obj_old = quad_objective(sqnorm, &w, &y, &gram);
            let obj_new = quad_objective(sqnorm, &w_new, &y, &gram);
            if obj_new <= obj_old {
                w = w_new;
            }
            let mut obj = obj_new.min(obj_old);
            report.objective_trace.push(obj);

            // One MBI update over the feature modes.
            let mut best_mode: Option<(usize, DMatrix<f64>, f64)> = None;
            for d in 0..d_feat {
                let blocks: Vec<DMatrix<f64>> = std::iter::once(w.clone())
                    .chain(factors.iter().cloned())
                    .collect();
                let co = kr_cofactor(&blocks, d + 1);
                let gram = co.transpose() * &co;
                let y = &unfold[d + 1] * &co;
                let chol = ridge_cholesky(&gram)?;
                let cand = chol.solve(&y.transpose()).transpose();
                let cand_obj = quad_objective(sqnorm, &cand, &y, &gram);
                let better = match &best_mode {
                    None => true,
                    Some((_, _, best_obj)) => {
                        cand_obj < *best_obj - 1e-12 * (1.0 + best_obj.abs())
                    }
                };
                if better {
                    best_mode = Some((d, cand, cand_obj));
                }
            }
            if let Some((d, cand, cand_obj)) = best_mode {
                if cand_obj <= obj {
                    factors[d] = cand;
                    obj = cand_obj;
                }
                report.chosen_modes.push(d);
            }
            report.objective_trace.push(obj);
            report.sweeps = sweep + 1;

            if prev_obj.is_finite() && prev_obj - obj <= opts.tol * prev_obj.max(f64::MIN_POSITIVE)
            {
                converged = true;
                break;
            }
            prev_obj = obj;
        }
        report.converged = converged;
        report.best_restart = restart;

        let final_obj = *report.objective_trace.last().unwrap_or(&f64::INFINITY);
        if best.as_ref().map_or(true, |(_, _, b)| final_obj < *b) {
            best = Some((
                HocpdModel {
                    w,
                    factors,
                    normalized: false,
                },
                report,
                final_obj,
            ));
        }
    }

    let (mut model, report, _) = best.expect("at least one restart");
    finalize(&mut model);
    Ok((model, report))
}

fn quad_objective(sqnorm: f64, a: &DMatrix<f64>, y: &DMatrix<f64>, gram: &DMatrix<f64>) -> f64 {
    let cross = a.component_mul(y).sum();
    let fit = (a.transpose() * a).component_mul(gram).sum();
    (sqnorm - 2.0 * cross + fit).max(0.0)
}

/// Normalizes factor columns, absorbs scales and signs into the loadings,
/// and orders bases by descending first element of the mode-1 factor.
fn finalize(model: &mut HocpdModel) {
    let rank = model.rank();
    for r in 0..rank {
        let mut scale = 1.0;
        for f in model.factors.iter_mut() {
            let norm = f.column(r).norm();
            if norm > 0.0 {
                f.column_mut(r).scale_mut(1.0 / norm);
                scale *= norm;
            } else {
                scale = 0.0;
            }
        }
        for f in model.factors.iter_mut() {
            if let Some(lead) = f.column(r).iter().find(|v| **v != 0.0) {
                if *lead < 0.0 {
                    f.column_mut(r).scale_mut(-1.0);
                    scale = -scale;
                }
            }
        }
        model.w.column_mut(r).scale_mut(scale);
    }
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| {
        model.factors[0][(0, b)]
            .partial_cmp(&model.factors[0][(0, a)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    model.w = permute_columns(&model.w, &order);
    for f in model.factors.iter_mut() {
        *f = permute_columns(f, &order);
    }
    model.normalized = true;
}

fn permute_columns(m: &DMatrix<f64>, order: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (dst, &src) in order.iter().enumerate() {
        out.column_mut(dst).copy_from(&m.column(src));
    }
    out
}

/// Row `i` of the normalized loading matrix: the subject's features under
/// the population-shared rank-1 bases.
pub fn hocpd_features(model: &HocpdModel, subject: usize) -> Result<DVector<f64>> {
    if !model.normalized {
        return Err(Error::InvalidArgument("model is not finalized".into()));
    }
    if subject >= model.n_subjects() {
        return Err(Error::InvalidArgument(format!(
            "subject {subject} out of range ({} subjects)",
            model.n_subjects()
        )));
    }
    Ok(model.w.row(subject).transpose())
}
