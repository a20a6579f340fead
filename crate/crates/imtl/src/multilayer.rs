//! Individualized multilayer tensor decomposition for multimodality data.
//!
//! Each subject's signal is modeled as a shared linear combination of
//! modality-specific rank-1 bases plus one rank-1 individual layer shared by
//! all of the subject's modalities. Fitting minimizes the squared residual
//! plus a quadratic penalty pushing the individual layers orthogonal to the
//! modality bases, by a bi-level scheme: a closed-form subject-weight solve
//! and per-modality maximum-block-improvement factor updates alternate until
//! stable, then each subject's layer is refined by its own MBI loop.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MultimodalDataset;
use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{leading_rank1, random_unit_factor, ridge_cholesky};
use crate::tensor::{kr_chain, kr_cofactor, vec_cofactor, DenseTensor};

/// Relative slack when comparing candidate block improvements; ties go to
/// the smaller mode index.
const MBI_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_outer: usize,
    /// Cap on inner sweeps in both the modality-layer and subject-layer loops.
    pub max_inner: usize,
    /// Stop threshold for the modality-layer loop (normalized squared change).
    pub modality_tol: f64,
    /// Stop threshold for each subject-layer loop.
    pub subject_tol: f64,
    /// Outer stop threshold on the normalized squared change of the fitted
    /// signal tensor.
    pub outer_tol: f64,
    /// Tolerance used by the block-stationarity check.
    pub stationarity_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Keep all individual layers frozen at zero.
    pub freeze_individual_layers: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_outer: 100,
            max_inner: 200,
            modality_tol: 1e-4,
            subject_tol: 1e-4,
            outer_tol: 1e-3,
            stationarity_tol: 1e-6,
            restarts: 5,
            seed: 0,
            freeze_individual_layers: false,
        }
    }
}

/// Fitted multilayer model.
///
/// Before finalization `w`, `factors` and `layers` are the raw iterates.
/// After finalization every factor column is unit-norm with its scale in
/// `modality_scales`, and every subject layer is unit-norm per mode with its
/// absorbed non-negative weight in `layer_weights`.
#[derive(Debug, Clone)]
pub struct MultilayerModel {
    /// Shared subject weights, `N x R`.
    pub w: DMatrix<f64>,
    /// Per-modality, per-mode factor matrices: `factors[m][d]` is `p_d x R`.
    pub factors: Vec<Vec<DMatrix<f64>>>,
    /// Per-subject, per-mode individual-layer vectors.
    pub layers: Vec<Vec<DVector<f64>>>,
    /// Column scales absorbed at finalization, `M x R`.
    pub modality_scales: Option<DMatrix<f64>>,
    /// Absorbed individual-layer weights, length `N`.
    pub layer_weights: Option<DVector<f64>>,
    pub lambda_s: f64,
    pub finalized: bool,
}

impl MultilayerModel {
    pub fn new(
        w: DMatrix<f64>,
        factors: Vec<Vec<DMatrix<f64>>>,
        layers: Vec<Vec<DVector<f64>>>,
        lambda_s: f64,
    ) -> Result<Self> {
        if factors.is_empty() || factors[0].is_empty() {
            return Err(Error::InvalidArgument(
                "model needs at least one modality and one mode".into(),
            ));
        }
        let rank = w.ncols();
        let dims: Vec<usize> = factors[0].iter().map(|f| f.nrows()).collect();
        for fs in &factors {
            if fs.len() != dims.len() {
                return Err(Error::ShapeMismatch("modalities differ in mode count".into()));
            }
            for (f, &p) in fs.iter().zip(&dims) {
                if f.nrows() != p || f.ncols() != rank {
                    return Err(Error::ShapeMismatch("factor matrix shape mismatch".into()));
                }
            }
        }
        if layers.len() != w.nrows() {
            return Err(Error::ShapeMismatch("layer count != subject count".into()));
        }
        for ls in &layers {
            if ls.len() != dims.len() || ls.iter().zip(&dims).any(|(v, &p)| v.len() != p) {
                return Err(Error::ShapeMismatch("layer vector shape mismatch".into()));
            }
        }
        if lambda_s < 0.0 {
            return Err(Error::InvalidArgument("lambda_s must be non-negative".into()));
        }
        Ok(Self {
            w,
            factors,
            layers,
            modality_scales: None,
            layer_weights: None,
            lambda_s,
            finalized: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_modalities(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors[0].iter().map(|f| f.nrows()).collect()
    }

    pub fn image_len(&self) -> usize {
        self.dims().iter().product()
    }

    /// The same model with the finalization scales folded back into the
    /// factor and layer entries (mode-1 columns carry the weights).
    pub fn effective(&self) -> MultilayerModel {
        if !self.finalized {
            return self.clone();
        }
        let mut out = self.clone();
        out.finalized = false;
        if let Some(scales) = &self.modality_scales {
            for (m, fs) in out.factors.iter_mut().enumerate() {
                for r in 0..self.rank() {
                    fs[0].column_mut(r).scale_mut(scales[(m, r)]);
                }
            }
        }
        if let Some(mu) = &self.layer_weights {
            for (i, ls) in out.layers.iter_mut().enumerate() {
                ls[0].scale_mut(mu[i]);
            }
        }
        out.modality_scales = None;
        out.layer_weights = None;
        out
    }

    /// Vectorized individual layer of one subject (raw parametrization).
    fn layer_vec_raw(&self, subject: usize) -> DVector<f64> {
        let ls = &self.layers[subject];
        vec_cofactor(ls, ls.len())
    }

    /// Dense signal reconstruction for one subject and modality.
    pub fn reconstruct_subject(&self, subject: usize, modality: usize) -> DenseTensor {
        let eff = self.effective();
        let cm = kr_chain(&eff.factors[modality]);
        let mut v = &cm * eff.w.row(subject).transpose();
        v += eff.layer_vec_raw(subject);
        DenseTensor::from_vector(&self.dims(), &v).expect("consistent dims")
    }

    /// Dense individual layer of one subject.
    pub fn layer_tensor(&self, subject: usize) -> DenseTensor {
        let eff = self.effective();
        DenseTensor::from_vector(&self.dims(), &eff.layer_vec_raw(subject)).expect("consistent dims")
    }
}

/// Extracted per-subject features: modality-layer weights, the individual
/// layer weight, and the normalized individual-layer factors.
#[derive(Debug, Clone)]
pub struct FeatureVector {
    /// `M x R` weights of the modality-specific layers.
    pub modality_weights: DMatrix<f64>,
    pub individual_weight: f64,
    pub individual_factors: Vec<DVector<f64>>,
}

impl FeatureVector {
    /// Flat layout: modality weights (modality-major, rank within), then the
    /// individual weight, then the concatenated factor vectors.
    pub fn to_vec(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.len());
        for m in 0..self.modality_weights.nrows() {
            for r in 0..self.modality_weights.ncols() {
                out.push(self.modality_weights[(m, r)]);
            }
        }
        out.push(self.individual_weight);
        for f in &self.individual_factors {
            out.extend_from_slice(f.as_slice());
        }
        DVector::from_vec(out)
    }

    pub fn len(&self) -> usize {
        self.modality_weights.len()
            + 1
            + self.individual_factors.iter().map(|f| f.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fit diagnostics: per-outer-iteration objective trace, MBI mode choices,
/// convergence flags, and the finalized orthogonality level.
#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub objective_trace: Vec<f64>,
    /// Modality MBI modes chosen in the last inner sweep of each outer
    /// iteration, one entry per modality.
    pub modality_modes: Vec<Vec<usize>>,
    /// Subject MBI modes chosen in the last sweep, one per subject.
    pub subject_modes: Vec<Vec<usize>>,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Max over (m, i, r) of the normalized basis/layer inner product.
    pub max_cross_inner: f64,
    pub best_restart: usize,
    pub wall_clock: Duration,
}

// ---------------------------------------------------------------------------
// shared solve kernels
// ---------------------------------------------------------------------------

fn quad_value(a: &DMatrix<f64>, y: &DMatrix<f64>, gram: &DMatrix<f64>) -> f64 {
    let cross = a.component_mul(y).sum();
    let fit = (a.transpose() * a).component_mul(gram).sum();
    fit - 2.0 * cross
}

/// Per-subject ridge solve of the shared weight matrix. `grams[m]` and
/// `ys[m]` come from modality `m`'s basis chain and residual data; subjects
/// sum only over their present modalities. Rows are kept unchanged when the
/// re-solve would not improve the quadratic loss.
fn solve_w_kernel(
    grams: &[DMatrix<f64>],
    ys: &[DMatrix<f64>],
    present: &[Vec<bool>],
    w_old: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = w_old.nrows();
    let rank = w_old.ncols();
    let mcount = grams.len();
    assert!(mcount <= 64, "at most 64 modalities supported");
    let mut w = w_old.clone();
    if rank == 0 {
        return Ok(w);
    }
    let mut chols: HashMap<u64, nalgebra::Cholesky<f64, nalgebra::Dyn>> = HashMap::new();
    for i in 0..n {
        let mut key = 0u64;
        let mut a = DMatrix::zeros(rank, rank);
        let mut b = DVector::zeros(rank);
        for m in 0..mcount {
            if present[i][m] {
                key |= 1 << m;
                a += &grams[m];
                b += ys[m].row(i).transpose();
            }
        }
        if key == 0 {
            continue;
        }
        if !chols.contains_key(&key) {
            chols.insert(key, ridge_cholesky(&a)?);
        }
        let wi = chols[&key].solve(&b);
        let old = w_old.row(i).transpose();
        let q_old = (&a * &old).dot(&old) - 2.0 * b.dot(&old);
        let q_new = (&a * &wi).dot(&wi) - 2.0 * b.dot(&wi);
        if q_new <= q_old {
            w.row_mut(i).copy_from(&wi.transpose());
        }
    }
    Ok(w)
}

/// Candidate solve for one modality factor block. `xt_d` is the mode-(d+1)
/// unfolding of the residualized aligned tensor, `cof` the matching
/// Khatri-Rao cofactor (subject weights fastest), and `penalty[r]` the
/// per-column quadratic penalty matrix already scaled by lambda.
fn modality_candidate_kernel(
    xt_d: &DMatrix<f64>,
    cof: &DMatrix<f64>,
    sqnorm: f64,
    penalty: Option<&[DMatrix<f64>]>,
    current: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64, f64)> {
    let p = xt_d.nrows();
    let rank = cof.ncols();
    let gram = cof.transpose() * cof;
    let y = xt_d * cof;

    let cand = match penalty {
        None => {
            let chol = ridge_cholesky(&gram)?;
            chol.solve(&y.transpose()).transpose()
        }
        Some(blocks) => {
            let np = p * rank;
            let mut a = DMatrix::zeros(np, np);
            for r in 0..rank {
                for r2 in 0..rank {
                    let g = gram[(r, r2)];
                    for i in 0..p {
                        a[(r * p + i, r2 * p + i)] += g;
                    }
                }
            }
            for (r, block) in blocks.iter().enumerate() {
                let mut view = a.view_mut((r * p, r * p), (p, p));
                view += block;
            }
            let chol = ridge_cholesky(&a)?;
            let rhs = DVector::from_column_slice(y.as_slice());
            let sol = chol.solve(&rhs);
            DMatrix::from_column_slice(p, rank, sol.as_slice())
        }
    };

    let value = |b: &DMatrix<f64>| {
        let mut v = sqnorm + quad_value(b, &y, &gram);
        if let Some(blocks) = penalty {
            for (r, block) in blocks.iter().enumerate() {
                let col = b.column(r);
                v += (block * col).dot(&col);
            }
        }
        v
    };
    Ok((cand.clone(), value(&cand), value(current)))
}

/// Candidate solve for one mode of a subject's individual layer.
///
/// `xbar_d[k]` is the mode-d unfolding of the residual of the k-th present
/// modality; `pen_vecs` holds the penalty vectors `c_mr * b_r^{(m),d}` over
/// all modalities and ranks.
fn subject_candidate_kernel(
    xbar_d: &[DMatrix<f64>],
    s_vecs: &[DVector<f64>],
    mode: usize,
    pen_vecs: &[DVector<f64>],
    lambda: f64,
    sqnorm: f64,
) -> Result<(DVector<f64>, f64, f64)> {
    let p = s_vecs[mode].len();
    let m_present = xbar_d.len() as f64;
    let scof = vec_cofactor(s_vecs, mode);
    let snorm2 = scof.norm_squared();

    let mut rhs = DVector::zeros(p);
    for x in xbar_d {
        rhs += x * &scof;
    }
    let mut a = DMatrix::from_diagonal_element(p, p, m_present * snorm2);
    if lambda > 0.0 {
        for v in pen_vecs {
            a.ger(lambda, v, v, 1.0);
        }
    }
    let chol = ridge_cholesky(&a)?;
    let cand = chol.solve(&rhs);

    let value = |s: &DVector<f64>| {
        let mut v = sqnorm - 2.0 * s.dot(&rhs) + m_present * s.norm_squared() * snorm2;
        if lambda > 0.0 {
            for pv in pen_vecs {
                let dot = pv.dot(s);
                v += lambda * dot * dot;
            }
        }
        v
    };
    Ok((cand.clone(), value(&cand), value(&s_vecs[mode])))
}

/// Residualized aligned tensor of one modality: data minus the current
/// individual layers, missing slices zero-filled.
fn residual_aligned(
    data: &MultimodalDataset,
    layers: &[Vec<DVector<f64>>],
    modality: usize,
) -> DenseTensor {
    let n = data.n_subjects();
    let mut out = data.aligned_modality(modality);
    let vals = out.values_mut();
    for (i, ls) in layers.iter().enumerate() {
        if !data.present(i, modality) || ls.iter().any(|v| v.norm_squared() == 0.0) {
            continue;
        }
        let sv = vec_cofactor(ls, ls.len());
        for (q, &v) in sv.as_slice().iter().enumerate() {
            vals[i + n * q] -= v;
        }
    }
    out
}

/// Products `<s_i^d, b_r^{(m),d}>` for one modality and mode, `N x R`.
fn layer_factor_dots(layers: &[Vec<DVector<f64>>], factor: &DMatrix<f64>, mode: usize) -> DMatrix<f64> {
    let n = layers.len();
    let rank = factor.ncols();
    DMatrix::from_fn(n, rank, |i, r| layers[i][mode].dot(&factor.column(r)))
}

/// Penalty blocks for a modality-factor candidate at mode `d`: for each
/// column r, `lambda * sum_i c_ir^2 s_i^d s_i^dT` with
/// `c_ir = prod_{d' != d} <s_i^{d'}, b_r^{(m),d'}>`.
fn modality_penalty_blocks(
    layers: &[Vec<DVector<f64>>],
    sdots: &[DMatrix<f64>],
    mode: usize,
    lambda: f64,
    p: usize,
    rank: usize,
) -> Option<Vec<DMatrix<f64>>> {
    if lambda == 0.0 {
        return None;
    }
    let active: Vec<usize> = (0..layers.len())
        .filter(|&i| layers[i].iter().all(|v| v.norm_squared() > 0.0))
        .collect();
    if active.is_empty() {
        return None;
    }
    let mut blocks = vec![DMatrix::zeros(p, p); rank];
    for &i in &active {
        for (r, block) in blocks.iter_mut().enumerate() {
            let mut c = 1.0;
            for (d2, dots) in sdots.iter().enumerate() {
                if d2 != mode {
                    c *= dots[(i, r)];
                }
            }
            if c != 0.0 {
                block.ger(lambda * c * c, &layers[i][mode], &layers[i][mode], 1.0);
            }
        }
    }
    Some(blocks)
}

/// Penalty vectors for a subject-layer candidate at mode `d` over all
/// modalities and ranks.
fn subject_penalty_vecs(
    factors: &[Vec<DMatrix<f64>>],
    s_vecs: &[DVector<f64>],
    mode: usize,
) -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for fs in factors {
        for r in 0..fs[0].ncols() {
            let mut c = 1.0;
            for (d2, f) in fs.iter().enumerate() {
                if d2 != mode {
                    c *= f.column(r).dot(&s_vecs[d2]);
                }
            }
            if c != 0.0 {
                out.push(c * fs[mode].column(r).into_owned());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// public block operations
// ---------------------------------------------------------------------------

fn check_model_data(model: &MultilayerModel, data: &MultimodalDataset) -> Result<()> {
    if model.n_subjects() != data.n_subjects()
        || model.n_modalities() != data.n_modalities()
        || model.dims() != data.dims()
    {
        return Err(Error::ShapeMismatch(
            "model and dataset shapes do not match".into(),
        ));
    }
    Ok(())
}

/// The penalized objective: squared residual over present images plus
/// `lambda_s` times the squared basis/layer inner products.
pub fn objective(model: &MultilayerModel, data: &MultimodalDataset) -> Result<f64> {
    check_model_data(model, data)?;
    let model = model.effective();
    let mut total = 0.0;
    for m in 0..model.n_modalities() {
        let cm = kr_chain(&model.factors[m]);
        for i in 0..model.n_subjects() {
            if let Some(img) = data.image(i, m) {
                let mut fitted = &cm * model.w.row(i).transpose();
                fitted += model.layer_vec_raw(i);
                let resid = img.vectorize() - fitted;
                total += resid.norm_squared();
            }
        }
    }
    total += model.lambda_s * cross_penalty(&model);
    Ok(total)
}

/// `sum_{m,i,r} <B_r^{(m)}, S_i>^2` on the raw parametrization.
fn cross_penalty(model: &MultilayerModel) -> f64 {
    let mut total = 0.0;
    for fs in &model.factors {
        for ls in &model.layers {
            for r in 0..model.rank() {
                let mut dot = 1.0;
                for (f, s) in fs.iter().zip(ls) {
                    dot *= f.column(r).dot(s);
                }
                total += dot * dot;
            }
        }
    }
    total
}

/// Closed-form re-solve of the shared subject weights with all factor and
/// layer blocks held fixed.
pub fn update_population_weights(
    model: &MultilayerModel,
    data: &MultimodalDataset,
) -> Result<DMatrix<f64>> {
    check_model_data(model, data)?;
    let model = model.effective();
    let mcount = model.n_modalities();
    let present: Vec<Vec<bool>> = (0..model.n_subjects())
        .map(|i| (0..mcount).map(|m| data.present(i, m)).collect())
        .collect();
    let mut grams = Vec::with_capacity(mcount);
    let mut ys = Vec::with_capacity(mcount);
    for m in 0..mcount {
        let cm = kr_chain(&model.factors[m]);
        let resid = residual_aligned(data, &model.layers, m);
        let x1 = resid.matricize(0)?;
        grams.push(cm.transpose() * &cm);
        ys.push(x1 * &cm);
    }
    solve_w_kernel(&grams, &ys, &present, &model.w)
}

/// Candidate factor block for modality `m`, mode `d`, plus its reduced
/// objective value.
pub fn modality_factor_candidate(
    model: &MultilayerModel,
    data: &MultimodalDataset,
    m: usize,
    d: usize,
) -> Result<(DMatrix<f64>, f64)> {
    check_model_data(model, data)?;
    let model = model.effective();
    let dims = model.dims();
    if m >= model.n_modalities() || d >= dims.len() {
        return Err(Error::InvalidArgument("modality or mode out of range".into()));
    }
    let resid = residual_aligned(data, &model.layers, m);
    let sqnorm = resid.squared_norm();
    let xt_d = resid.matricize(d + 1)?;
    let mut w_masked = model.w.clone();
    for i in 0..model.n_subjects() {
        if !data.present(i, m) {
            w_masked.row_mut(i).fill(0.0);
        }
    }
    let blocks: Vec<DMatrix<f64>> = std::iter::once(w_masked)
        .chain(model.factors[m].iter().cloned())
        .collect();
    let cof = kr_cofactor(&blocks, d + 1);
    let sdots: Vec<DMatrix<f64>> = (0..dims.len())
        .map(|d2| layer_factor_dots(&model.layers, &model.factors[m][d2], d2))
        .collect();
    let penalty = modality_penalty_blocks(
        &model.layers,
        &sdots,
        d,
        model.lambda_s,
        dims[d],
        model.rank(),
    );
    let (cand, obj, _) = modality_candidate_kernel(
        &xt_d,
        &cof,
        sqnorm,
        penalty.as_deref(),
        &model.factors[m][d],
    )?;
    Ok((cand, obj))
}

/// One maximum-block-improvement step on modality `m`: all per-mode
/// candidates are computed and the best one applied. Returns the updated
/// model and the chosen mode.
pub fn update_modality_factors_mbi(
    model: &MultilayerModel,
    data: &MultimodalDataset,
    m: usize,
) -> Result<(MultilayerModel, usize)> {
    check_model_data(model, data)?;
    let mut model = model.effective();
    let dcount = model.dims().len();
    let mut best: Option<(usize, DMatrix<f64>, f64)> = None;
    for d in 0..dcount {
        let (cand, obj) = modality_factor_candidate(&model, data, m, d)?;
        let better = match &best {
            None => true,
            Some((_, _, b)) => obj < *b - MBI_TIE_EPS * (1.0 + b.abs()),
        };
        if better {
            best = Some((d, cand, obj));
        }
    }
    let (d, cand, _) = best.ok_or_else(|| Error::InvalidArgument("no modes".into()))?;
    model.factors[m][d] = cand;
    Ok((model, d))
}

/// Candidate vector for mode `d` of subject `i`'s individual layer, plus its
/// reduced objective value.
pub fn individual_layer_candidate(
    model: &MultilayerModel,
    data: &MultimodalDataset,
    i: usize,
    d: usize,
) -> Result<(DVector<f64>, f64)> {
    check_model_data(model, data)?;
    let model = model.effective();
    let dims = model.dims();
    if i >= model.n_subjects() || d >= dims.len() {
        return Err(Error::InvalidArgument("subject or mode out of range".into()));
    }
    let (xbar, sqnorm) = subject_residuals(&model, data, i)?;
    let xbar_d: Vec<DMatrix<f64>> = xbar
        .iter()
        .map(|t| t.matricize(d))
        .collect::<Result<_>>()?;
    let pen = subject_penalty_vecs(&model.factors, &model.layers[i], d);
    let (cand, obj, _) = subject_candidate_kernel(
        &xbar_d,
        &model.layers[i],
        d,
        &pen,
        model.lambda_s,
        sqnorm,
    )?;
    Ok((cand, obj))
}

/// One MBI step on subject `i`'s individual layer. A layer currently at zero
/// is re-seeded from the leading rank-1 fit of the subject's mean residual
/// before the candidates are formed.
pub fn update_individual_layer_mbi(
    model: &MultilayerModel,
    data: &MultimodalDataset,
    i: usize,
) -> Result<(MultilayerModel, usize)> {
    check_model_data(model, data)?;
    let mut model = model.effective();
    let dcount = model.dims().len();
    if model.layers[i].iter().any(|v| v.norm_squared() == 0.0) {
        let (xbar, _) = subject_residuals(&model, data, i)?;
        if let Some(seed) = reseed_layer(&model, &xbar) {
            model.layers[i] = seed;
        } else {
            return Ok((model, 0));
        }
    }
    let mut best: Option<(usize, DVector<f64>, f64)> = None;
    for d in 0..dcount {
        let (cand, obj) = individual_layer_candidate(&model, data, i, d)?;
        let better = match &best {
            None => true,
            Some((_, _, b)) => obj < *b - MBI_TIE_EPS * (1.0 + b.abs()),
        };
        if better {
            best = Some((d, cand, obj));
        }
    }
    let (d, cand, _) = best.ok_or_else(|| Error::InvalidArgument("no modes".into()))?;
    model.layers[i][d] = cand;
    Ok((model, d))
}

/// Per-modality residuals of one subject after removing the modality layers.
fn subject_residuals(
    model: &MultilayerModel,
    data: &MultimodalDataset,
    i: usize,
) -> Result<(Vec<DenseTensor>, f64)> {
    let dims = model.dims();
    let mut out = Vec::new();
    let mut sqnorm = 0.0;
    for m in 0..model.n_modalities() {
        if let Some(img) = data.image(i, m) {
            let cm = kr_chain(&model.factors[m]);
            let v = img.vectorize() - &cm * model.w.row(i).transpose();
            let t = DenseTensor::from_vector(&dims, &v)?;
            sqnorm += t.squared_norm();
            out.push(t);
        }
    }
    Ok((out, sqnorm))
}

/// Re-seed rule for a degenerate (all-zero) individual layer: the leading
/// rank-1 direction of the mean residual across present modalities, scaled
/// by the optimal amplitude for the penalized objective. Returns `None`
/// when the residual is zero or the optimal amplitude vanishes.
fn reseed_layer(model: &MultilayerModel, xbar: &[DenseTensor]) -> Option<Vec<DVector<f64>>> {
    if xbar.is_empty() {
        return None;
    }
    let mut mean = DenseTensor::zeros(&model.dims());
    for t in xbar {
        mean.add_assign(t).expect("matching dims");
    }
    mean.scale(1.0 / xbar.len() as f64);
    let dirs = leading_rank1(&mean)?;
    let dir_vec = vec_cofactor(&dirs, dirs.len());
    let mut num = 0.0;
    for t in xbar {
        num += t.vectorize().dot(&dir_vec);
    }
    let mut den = xbar.len() as f64;
    if model.lambda_s > 0.0 {
        for fs in &model.factors {
            for r in 0..model.rank() {
                let mut c = 1.0;
                for (f, s) in fs.iter().zip(&dirs) {
                    c *= f.column(r).dot(s);
                }
                den += model.lambda_s * c * c;
            }
        }
    }
    let mu = num / den;
    if mu == 0.0 {
        return None;
    }
    let mut seed = dirs;
    seed[0].scale_mut(mu);
    Some(seed)
}

/// Max relative objective improvement obtainable by re-solving any single
/// block of the model. Small values certify a block-wise stationary point.
pub fn block_stationarity_gap(model: &MultilayerModel, data: &MultimodalDataset) -> Result<f64> {
    let model = model.effective();
    let base = objective(&model, data)?;
    let scale = base.max(f64::MIN_POSITIVE);
    let mut gap: f64 = 0.0;

    let mut probe = model.clone();
    probe.w = update_population_weights(&model, data)?;
    gap = gap.max((base - objective(&probe, data)?) / scale);

    for m in 0..model.n_modalities() {
        for d in 0..model.dims().len() {
            let (cand, _) = modality_factor_candidate(&model, data, m, d)?;
            let mut probe = model.clone();
            probe.factors[m][d] = cand;
            gap = gap.max((base - objective(&probe, data)?) / scale);
        }
    }
    for i in 0..model.n_subjects() {
        for d in 0..model.dims().len() {
            let (cand, _) = individual_layer_candidate(&model, data, i, d)?;
            let mut probe = model.clone();
            probe.layers[i][d] = cand;
            gap = gap.max((base - objective(&probe, data)?) / scale);
        }
    }
    Ok(gap)
}

// ---------------------------------------------------------------------------
// the bi-level fit
// ---------------------------------------------------------------------------

struct RunState {
    w: DMatrix<f64>,
    factors: Vec<Vec<DMatrix<f64>>>,
    layers: Vec<Vec<DVector<f64>>>,
    trace: Vec<f64>,
    modality_modes: Vec<Vec<usize>>,
    subject_modes: Vec<Vec<usize>>,
    outer_iterations: usize,
    converged: bool,
    final_obj: f64,
}

/// Fits the multilayer decomposition by the bi-level block-improvement
/// scheme, running `opts.restarts` random initializations and keeping the
/// best final objective. The returned model is finalized (unit-norm factor
/// columns with absorbed scales, ordered bases, non-negative layer weights).
pub fn fit(
    data: &MultimodalDataset,
    rank: usize,
    lambda_s: f64,
    opts: &FitOptions,
) -> Result<(MultilayerModel, FitReport)> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if lambda_s < 0.0 {
        return Err(Error::InvalidArgument("lambda_s must be non-negative".into()));
    }
    if let Some(&p) = data.dims().iter().find(|&&p| p < rank) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} exceeds marginal dimension {p}"
        )));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite("dataset has non-finite values".into()));
    }

    let start = Instant::now();
    let mut best: Option<RunState> = None;
    let mut best_restart = 0;
    for restart in 0..opts.restarts.max(1) {
        let run = fit_once(data, rank, lambda_s, opts, opts.seed.wrapping_add(restart as u64))?;
        if best.as_ref().map_or(true, |b| run.final_obj < b.final_obj) {
            best_restart = restart;
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");

    let mut model = MultilayerModel::new(run.w, run.factors, run.layers, lambda_s)?;
    finalize(&mut model);
    let report = FitReport {
        objective_trace: run.trace,
        modality_modes: run.modality_modes,
        subject_modes: run.subject_modes,
        outer_iterations: run.outer_iterations,
        converged: run.converged,
        max_cross_inner: max_cross_inner(&model),
        best_restart,
        wall_clock: start.elapsed(),
    };
    Ok((model, report))
}

fn fit_once(
    data: &MultimodalDataset,
    rank: usize,
    lambda_s: f64,
    opts: &FitOptions,
    seed: u64,
) -> Result<RunState> {
    let n = data.n_subjects();
    let mcount = data.n_modalities();
    let dims = data.dims().to_vec();
    let dcount = dims.len();
    let ptotal: usize = dims.iter().product();
    let present: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..mcount).map(|m| data.present(i, m)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors: Vec<Vec<DMatrix<f64>>> = (0..mcount)
        .map(|_| {
            dims.iter()
                .map(|&p| random_unit_factor(&mut rng, p, rank))
                .collect()
        })
        .collect();
    let mut w = DMatrix::zeros(n, rank);
    let mut layers: Vec<Vec<DVector<f64>>> =
        vec![dims.iter().map(|&p| DVector::zeros(p)).collect(); n];

    // With W = 0 and S = 0 the initial fitted signal is identically zero.
    let mut prev_theta: Vec<DMatrix<f64>> = vec![DMatrix::zeros(ptotal, n); mcount];

    let mut trace = Vec::new();
    let mut modality_modes = Vec::new();
    let mut subject_modes = Vec::new();
    let mut converged = false;
    let mut outer_iterations = 0;

    for t in 0..opts.max_outer {
        outer_iterations = t + 1;

        // ---- Step 2: modality layers given the individual layers ----
        let contexts: Vec<(Vec<DMatrix<f64>>, f64)> = (0..mcount)
            .into_par_iter()
            .map(|m| {
                let resid = residual_aligned(data, &layers, m);
                let sq = resid.squared_norm();
                let unfolds: Vec<DMatrix<f64>> = (0..=dcount)
                    .map(|k| resid.matricize(k).expect("valid mode"))
                    .collect();
                (unfolds, sq)
            })
            .collect();
        let mut sdots: Vec<Vec<DMatrix<f64>>> = (0..mcount)
            .map(|m| {
                (0..dcount)
                    .map(|d| layer_factor_dots(&layers, &factors[m][d], d))
                    .collect()
            })
            .collect();
        let w_masks: Vec<Vec<usize>> = (0..mcount)
            .map(|m| (0..n).filter(|&i| !present[i][m]).collect())
            .collect();

        let mut last_modality_modes = vec![0usize; mcount];
        for _sweep in 0..opts.max_inner {
            // shared weight solve
            let grams_ys: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..mcount)
                .into_par_iter()
                .map(|m| {
                    let cm = kr_chain(&factors[m]);
                    let gram = cm.transpose() * &cm;
                    let y = &contexts[m].0[0] * &cm;
                    (gram, y)
                })
                .collect();
            let grams: Vec<DMatrix<f64>> = grams_ys.iter().map(|(g, _)| g.clone()).collect();
            let ys: Vec<DMatrix<f64>> = grams_ys.into_iter().map(|(_, y)| y).collect();
            let w_new = solve_w_kernel(&grams, &ys, &present, &w)?;
            let dw = (&w_new - &w).norm_squared();
            w = w_new;

            // per-modality MBI factor updates (disjoint blocks)
            let updates: Vec<Result<(usize, DMatrix<f64>, bool)>> = (0..mcount)
                .into_par_iter()
                .map(|m| {
                    let mut w_masked = w.clone();
                    for &i in &w_masks[m] {
                        w_masked.row_mut(i).fill(0.0);
                    }
                    let mut best: Option<(usize, DMatrix<f64>, f64, f64)> = None;
                    for d in 0..dcount {
                        let blocks: Vec<DMatrix<f64>> = std::iter::once(w_masked.clone())
                            .chain(factors[m].iter().cloned())
                            .collect();
                        let cof = kr_cofactor(&blocks, d + 1);
                        let penalty = modality_penalty_blocks(
                            &layers, &sdots[m], d, lambda_s, dims[d], rank,
                        );
                        let (cand, obj, cur) = modality_candidate_kernel(
                            &contexts[m].0[d + 1],
                            &cof,
                            contexts[m].1,
                            penalty.as_deref(),
                            &factors[m][d],
                        )?;
                        let better = match &best {
                            None => true,
                            Some((_, _, b, _)) => obj < *b - MBI_TIE_EPS * (1.0 + b.abs()),
                        };
                        if better {
                            best = Some((d, cand, obj, cur));
                        }
                    }
                    let (d, cand, obj, cur) = best.expect("at least one mode");
                    Ok((d, cand, obj <= cur))
                })
                .collect();

            let mut db = 0.0;
            for (m, upd) in updates.into_iter().enumerate() {
                let (d, cand, improves) = upd?;
                last_modality_modes[m] = d;
                if improves {
                    db += (&cand - &factors[m][d]).norm_squared();
                    factors[m][d] = cand;
                    sdots[m][d] = layer_factor_dots(&layers, &factors[m][d], d);
                }
            }

            let crit = dw / (n * rank) as f64 + db / (mcount * rank * ptotal) as f64;
            if crit <= opts.modality_tol {
                break;
            }
        }
        modality_modes.push(last_modality_modes);

        // ---- Step 3: individual layers given the modality layers ----
        let chains: Vec<DMatrix<f64>> = (0..mcount).map(|m| kr_chain(&factors[m])).collect();
        let mut last_subject_modes = vec![0usize; n];
        if !opts.freeze_individual_layers {
            let results: Vec<Result<(Vec<DVector<f64>>, usize)>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    subject_layer_loop(
                        data, &factors, &chains, &w, &layers[i], i, lambda_s, opts, &dims,
                    )
                })
                .collect();
            for (i, res) in results.into_iter().enumerate() {
                let (s_new, mode) = res?;
                layers[i] = s_new;
                last_subject_modes[i] = mode;
            }
        }
        subject_modes.push(last_subject_modes);

        // ---- Step 4: objective and outer stopping rule ----
        let mut theta: Vec<DMatrix<f64>> = Vec::with_capacity(mcount);
        for chain in &chains {
            theta.push(chain * w.transpose());
        }
        for (i, ls) in layers.iter().enumerate() {
            if ls.iter().all(|v| v.norm_squared() > 0.0) {
                let sv = vec_cofactor(ls, ls.len());
                for th in theta.iter_mut() {
                    th.column_mut(i).add_assign_vec(&sv);
                }
            }
        }
        let mut obj = 0.0;
        for (m, th) in theta.iter().enumerate() {
            for i in 0..n {
                if present[i][m] {
                    let img = data.image(i, m).expect("present");
                    let col = th.column(i);
                    obj += img
                        .values()
                        .iter()
                        .zip(col.iter())
                        .map(|(x, t)| (x - t) * (x - t))
                        .sum::<f64>();
                }
            }
        }
        if lambda_s > 0.0 {
            let probe = MultilayerModel {
                w: w.clone(),
                factors: factors.clone(),
                layers: layers.clone(),
                modality_scales: None,
                layer_weights: None,
                lambda_s,
                finalized: false,
            };
            obj += lambda_s * cross_penalty(&probe);
        }
        trace.push(obj);

        let change: f64 = theta
            .iter()
            .zip(&prev_theta)
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        prev_theta = theta;
        if obj == 0.0 || change / (n * mcount * ptotal) as f64 <= opts.outer_tol {
            converged = true;
            break;
        }
    }

    let final_obj = *trace.last().unwrap_or(&f64::INFINITY);
    Ok(RunState {
        w,
        factors,
        layers,
        trace,
        modality_modes,
        subject_modes,
        outer_iterations,
        converged,
        final_obj,
    })
}

trait AddAssignVec {
    fn add_assign_vec(&mut self, v: &DVector<f64>);
}

impl AddAssignVec for nalgebra::DVectorViewMut<'_, f64> {
    fn add_assign_vec(&mut self, v: &DVector<f64>) {
        *self += v;
    }
}

#[allow(clippy::too_many_arguments)]
fn subject_layer_loop(
    data: &MultimodalDataset,
    factors: &[Vec<DMatrix<f64>>],
    chains: &[DMatrix<f64>],
    w: &DMatrix<f64>,
    layers_i: &[DVector<f64>],
    i: usize,
    lambda_s: f64,
    opts: &FitOptions,
    dims: &[usize],
) -> Result<(Vec<DVector<f64>>, usize)> {
    let ptotal: usize = dims.iter().product();
    let dcount = dims.len();
    let mut xbar = Vec::new();
    let mut sqnorm = 0.0;
    for (m, chain) in chains.iter().enumerate() {
        if let Some(img) = data.image(i, m) {
            let v = img.vectorize() - chain * w.row(i).transpose();
            let t = DenseTensor::from_vector(dims, &v)?;
            sqnorm += t.squared_norm();
            xbar.push(t);
        }
    }
    let mut s: Vec<DVector<f64>> = layers_i.to_vec();
    let mut chosen = 0usize;
    if xbar.is_empty() {
        return Ok((s, chosen));
    }
    let xbar_mats: Vec<Vec<DMatrix<f64>>> = xbar
        .iter()
        .map(|t| (0..dcount).map(|d| t.matricize(d).expect("valid mode")).collect())
        .collect();

    for _sweep in 0..opts.max_inner {
        if s.iter().any(|v| v.norm_squared() == 0.0) {
            let probe = MultilayerModel {
                w: w.clone_owned(),
                factors: factors.to_vec(),
                layers: vec![s.clone()],
                modality_scales: None,
                layer_weights: None,
                lambda_s,
                finalized: false,
            };
            match reseed_layer(&probe, &xbar) {
                Some(seed) => s = seed,
                None => break,
            }
        }
        let mut best: Option<(usize, DVector<f64>, f64, f64)> = None;
        for d in 0..dcount {
            let slices: Vec<DMatrix<f64>> =
                xbar_mats.iter().map(|mats| mats[d].clone()).collect();
            let pen = subject_penalty_vecs(factors, &s, d);
            let (cand, obj, cur) =
                subject_candidate_kernel(&slices, &s, d, &pen, lambda_s, sqnorm)?;
            let better = match &best {
                None => true,
                Some((_, _, b, _)) => obj < *b - MBI_TIE_EPS * (1.0 + b.abs()),
            };
            if better {
                best = Some((d, cand, obj, cur));
            }
        }
        let (d, cand, obj, cur) = best.expect("at least one mode");
        chosen = d;
        let mut delta = 0.0;
        if obj <= cur {
            delta = (&cand - &s[d]).norm_squared();
            s[d] = cand;
        }
        if delta / ptotal as f64 <= opts.subject_tol {
            break;
        }
    }
    Ok((s, chosen))
}

/// Normalization, basis ordering and sign conventions applied once after the
/// final iteration.
fn finalize(model: &mut MultilayerModel) {
    let rank = model.rank();
    let mcount = model.n_modalities();
    let mut scales = DMatrix::zeros(mcount, rank);
    for (m, fs) in model.factors.iter_mut().enumerate() {
        for r in 0..rank {
            let mut scale = 1.0;
            for f in fs.iter_mut() {
                let norm = f.column(r).norm();
                if norm > 0.0 {
                    f.column_mut(r).scale_mut(1.0 / norm);
                    scale *= norm;
                } else {
                    scale = 0.0;
                }
            }
            scales[(m, r)] = scale;
        }
    }
    // Order bases by descending first element of the first modality's mode-1
    // factor; the shared weight matrix forces one joint permutation.
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| {
        model.factors[0][0][(0, b)]
            .partial_cmp(&model.factors[0][0][(0, a)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let permute = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (dst, &src) in order.iter().enumerate() {
            out.column_mut(dst).copy_from(&m.column(src));
        }
        out
    };
    model.w = permute(&model.w);
    scales = permute(&scales);
    for fs in model.factors.iter_mut() {
        for f in fs.iter_mut() {
            *f = permute(f);
        }
    }
    model.modality_scales = Some(scales);

    // Individual layers: unit-norm vectors with the weight absorbed into mu,
    // sign flips of modes 2..D compensated in mode 1.
    let n = model.n_subjects();
    let mut mu = DVector::zeros(n);
    for (i, ls) in model.layers.iter_mut().enumerate() {
        let mut weight = 1.0;
        let mut zero = false;
        for v in ls.iter_mut() {
            let norm = v.norm();
            if norm == 0.0 {
                zero = true;
            } else {
                v.scale_mut(1.0 / norm);
                weight *= norm;
            }
        }
        if zero {
            for v in ls.iter_mut() {
                v.fill(0.0);
            }
            mu[i] = 0.0;
            continue;
        }
        let dcount = ls.len();
        for d in 1..dcount {
            if let Some(lead) = ls[d].iter().find(|v| **v != 0.0) {
                if *lead < 0.0 {
                    ls[d].scale_mut(-1.0);
                    ls[0].scale_mut(-1.0);
                }
            }
        }
        mu[i] = weight;
    }
    model.layer_weights = Some(mu);
    model.finalized = true;
}

/// Max over (m, i, r) of |<B_r^{(m)}, S_i>| for unit-norm bases and layers.
pub fn max_cross_inner(model: &MultilayerModel) -> f64 {
    if !model.finalized {
        return f64::NAN;
    }
    let mut max: f64 = 0.0;
    for fs in &model.factors {
        for (i, ls) in model.layers.iter().enumerate() {
            if model.layer_weights.as_ref().map_or(false, |mu| mu[i] == 0.0) {
                continue;
            }
            for r in 0..model.rank() {
                let mut dot = 1.0;
                for (f, s) in fs.iter().zip(ls) {
                    dot *= f.column(r).dot(s);
                }
                max = max.max(dot.abs());
            }
        }
    }
    max
}

// ---------------------------------------------------------------------------
// feature extraction and new-subject projection
// ---------------------------------------------------------------------------

impl MultilayerModel {
    /// Features of a training subject: per-modality layer weights
    /// `W_ir * scale_mr`, the individual-layer weight, and the normalized
    /// layer factors.
    pub fn extract_features(&self, subject: usize) -> Result<FeatureVector> {
        if !self.finalized {
            return Err(Error::InvalidArgument("model is not finalized".into()));
        }
        if subject >= self.n_subjects() {
            return Err(Error::InvalidArgument(format!(
                "subject {subject} out of range"
            )));
        }
        let scales = self.modality_scales.as_ref().expect("finalized");
        let mu = self.layer_weights.as_ref().expect("finalized");
        let mut weights = DMatrix::zeros(self.n_modalities(), self.rank());
        for m in 0..self.n_modalities() {
            for r in 0..self.rank() {
                weights[(m, r)] = self.w[(subject, r)] * scales[(m, r)];
            }
        }
        Ok(FeatureVector {
            modality_weights: weights,
            individual_weight: mu[subject],
            individual_factors: self.layers[subject].clone(),
        })
    }

    /// Projects a new subject onto the fitted bases: the weight row is solved
    /// in closed form and the individual layer refined by the same MBI loop
    /// used in training, alternating until stable.
    pub fn fit_new_subject(&self, images: &[DenseTensor]) -> Result<FeatureVector> {
        if !self.finalized {
            return Err(Error::InvalidArgument("model is not finalized".into()));
        }
        if images.len() != self.n_modalities() {
            return Err(Error::ShapeMismatch(format!(
                "{} images for {} modalities",
                images.len(),
                self.n_modalities()
            )));
        }
        let dims = self.dims();
        for img in images {
            if img.dims() != dims.as_slice() {
                return Err(Error::ShapeMismatch("new-subject image dims mismatch".into()));
            }
        }
        let eff = self.effective();
        let rank = self.rank();
        let mcount = self.n_modalities();
        let chains: Vec<DMatrix<f64>> = (0..mcount).map(|m| kr_chain(&eff.factors[m])).collect();
        let grams: Vec<DMatrix<f64>> = chains.iter().map(|c| c.transpose() * c).collect();
        let gram_sum: DMatrix<f64> = grams.iter().sum();
        let xvecs: Vec<DVector<f64>> = images.iter().map(DenseTensor::vectorize).collect();

        let opts = FitOptions {
            subject_tol: 1e-12,
            ..FitOptions::default()
        };
        let mut w_row = DVector::zeros(rank);
        let mut s: Vec<DVector<f64>> = dims.iter().map(|&p| DVector::zeros(p)).collect();
        let data_one = MultimodalDataset::new(
            vec![images.iter().cloned().map(Some).collect()],
            None,
        )?;
        for _ in 0..opts.max_outer {
            // weight row given the layer
            let svec = if s.iter().all(|v| v.norm_squared() > 0.0) {
                vec_cofactor(&s, s.len())
            } else {
                DVector::zeros(dims.iter().product())
            };
            if rank > 0 {
                let mut b = DVector::zeros(rank);
                for (chain, x) in chains.iter().zip(&xvecs) {
                    b += chain.transpose() * (x - &svec);
                }
                let chol = ridge_cholesky(&gram_sum)?;
                w_row = chol.solve(&b);
            }
            let w_mat = DMatrix::from_row_slice(1, rank, w_row.as_slice());
            let (s_new, _) = subject_layer_loop(
                &data_one, &eff.factors, &chains, &w_mat, &s, 0, eff.lambda_s, &opts, &dims,
            )?;
            let ds: f64 = s_new
                .iter()
                .zip(&s)
                .map(|(a, b)| (a - b).norm_squared())
                .sum();
            s = s_new;
            if ds <= 1e-12 {
                break;
            }
        }

        // finalize the subject block
        let scales = self.modality_scales.as_ref().expect("finalized");
        let mut weights = DMatrix::zeros(mcount, rank);
        for m in 0..mcount {
            for r in 0..rank {
                weights[(m, r)] = w_row[r] * scales[(m, r)];
            }
        }
        let mut mu = 1.0;
        let mut zero = false;
        let mut s_norm = s.clone();
        for v in s_norm.iter_mut() {
            let norm = v.norm();
            if norm == 0.0 {
                zero = true;
            } else {
                v.scale_mut(1.0 / norm);
                mu *= norm;
            }
        }
        if zero {
            mu = 0.0;
            for v in s_norm.iter_mut() {
                v.fill(0.0);
            }
        } else {
            for d in 1..s_norm.len() {
                let flip = s_norm[d].iter().find(|v| **v != 0.0).map_or(false, |v| *v < 0.0);
                if flip {
                    s_norm[d].scale_mut(-1.0);
                    s_norm[0].scale_mut(-1.0);
                }
            }
        }
        Ok(FeatureVector {
            modality_weights: weights,
            individual_weight: mu,
            individual_factors: s_norm,
        })
    }
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    rank: usize,
    n_subjects: usize,
    n_modalities: usize,
    dims: Vec<usize>,
    lambda_s: f64,
    finalized: bool,
}

fn matrix_tensor(m: &DMatrix<f64>) -> DenseTensor {
    DenseTensor::new(vec![m.nrows().max(1), m.ncols().max(1)], {
        if m.is_empty() {
            vec![0.0; m.nrows().max(1) * m.ncols().max(1)]
        } else {
            m.as_slice().to_vec()
        }
    })
    .expect("consistent dims")
}

impl MultilayerModel {
    /// Writes the model as a directory: a JSON manifest plus IMTD files for
    /// the weight matrix, every factor matrix and every layer vector.
    pub fn save_dir<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = ModelManifest {
            rank: self.rank(),
            n_subjects: self.n_subjects(),
            n_modalities: self.n_modalities(),
            dims: self.dims(),
            lambda_s: self.lambda_s,
            finalized: self.finalized,
        };
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest)?)?;
        io::save_tensor(dir.join("w.imtd"), &matrix_tensor(&self.w))?;
        for (m, fs_) in self.factors.iter().enumerate() {
            for (d, f) in fs_.iter().enumerate() {
                io::save_tensor(dir.join(format!("factor_m{m}_d{d}.imtd")), &matrix_tensor(f))?;
            }
        }
        for (i, ls) in self.layers.iter().enumerate() {
            for (d, v) in ls.iter().enumerate() {
                let t = DenseTensor::new(vec![v.len()], v.as_slice().to_vec())?;
                io::save_tensor(dir.join(format!("layer_s{i}_d{d}.imtd")), &t)?;
            }
        }
        if let Some(scales) = &self.modality_scales {
            io::save_tensor(dir.join("scales.imtd"), &matrix_tensor(scales))?;
        }
        if let Some(mu) = &self.layer_weights {
            let t = DenseTensor::new(vec![mu.len()], mu.as_slice().to_vec())?;
            io::save_tensor(dir.join("layer_weights.imtd"), &t)?;
        }
        Ok(())
    }

    pub fn load_dir<P: AsRef<Path>>(dir: P) -> Result<MultilayerModel> {
        let dir = dir.as_ref();
        let manifest: ModelManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
        let load_matrix = |name: String, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let t = io::load_tensor(dir.join(name))?;
            if rows == 0 || cols == 0 {
                return Ok(DMatrix::zeros(rows, cols));
            }
            if t.len() != rows * cols {
                return Err(Error::Format("stored matrix has wrong size".into()));
            }
            Ok(DMatrix::from_column_slice(rows, cols, t.values()))
        };
        let w = load_matrix("w.imtd".into(), manifest.n_subjects, manifest.rank)?;
        let mut factors = Vec::new();
        for m in 0..manifest.n_modalities {
            let mut fs_ = Vec::new();
            for (d, &p) in manifest.dims.iter().enumerate() {
                fs_.push(load_matrix(format!("factor_m{m}_d{d}.imtd"), p, manifest.rank)?);
            }
            factors.push(fs_);
        }
        let mut layers = Vec::new();
        for i in 0..manifest.n_subjects {
            let mut ls = Vec::new();
            for (d, &p) in manifest.dims.iter().enumerate() {
                let t = io::load_tensor(dir.join(format!("layer_s{i}_d{d}.imtd")))?;
                if t.len() != p {
                    return Err(Error::Format("stored layer has wrong size".into()));
                }
                ls.push(DVector::from_column_slice(t.values()));
            }
            layers.push(ls);
        }
        let mut model = MultilayerModel::new(w, factors, layers, manifest.lambda_s)?;
        if manifest.finalized {
            let scales = io::load_tensor(dir.join("scales.imtd"))?;
            model.modality_scales = Some(DMatrix::from_column_slice(
                manifest.n_modalities,
                manifest.rank,
                scales.values(),
            ));
            let mu = io::load_tensor(dir.join("layer_weights.imtd"))?;
            model.layer_weights = Some(DVector::from_column_slice(mu.values()));
            model.finalized = true;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::outer_rank1;
    use rand::rngs::StdRng;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> DVector<f64> {
        DVector::from_vec(v).normalize()
    }

    /// Noiseless instance: bases supported on the first half of each mode,
    /// individual layers on the second half, so all cross inner products
    /// vanish and the decomposition is exact.
    fn orthogonal_instance(
        n: usize,
        mcount: usize,
        p: usize,
        rank: usize,
        seed: u64,
    ) -> (MultimodalDataset, MultilayerModel) {
        let mut rng = StdRng::seed_from_u64(seed);
        let half = p / 2;
        let mut rand_support = |lo: usize, hi: usize| -> DVector<f64> {
            DVector::from_fn(p, |j, _| {
                if j >= lo && j < hi {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            })
            .normalize()
        };
        let factors: Vec<Vec<DMatrix<f64>>> = (0..mcount)
            .map(|_| {
                (0..2)
                    .map(|_| {
                        let cols: Vec<DVector<f64>> =
                            (0..rank).map(|_| rand_support(0, half)).collect();
                        DMatrix::from_columns(&cols)
                    })
                    .collect()
            })
            .collect();
        let mut layers: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rand_support(half, p);
            let v = rand_support(half, p);
            layers.push(vec![u, v]);
        }
        drop(rand_support);
        for ls in layers.iter_mut() {
            ls[0] *= rng.random_range(0.5..2.0f64);
        }
        let w = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-2.0..2.0));
        let truth = MultilayerModel::new(w, factors, layers, 1.0).unwrap();
        let images: Vec<Vec<Option<DenseTensor>>> = (0..n)
            .map(|i| {
                (0..mcount)
                    .map(|m| Some(truth.reconstruct_subject(i, m)))
                    .collect()
            })
            .collect();
        (MultimodalDataset::new(images, None).unwrap(), truth)
    }

    fn zero_model(n: usize, mcount: usize, dims: &[usize], rank: usize, lambda: f64) -> MultilayerModel {
        let factors = vec![dims.iter().map(|&p| DMatrix::from_fn(p, rank, |i, r| if i == r { 1.0 } else { 0.0 })).collect(); mcount];
        let layers = vec![dims.iter().map(|&p| DVector::zeros(p)).collect(); n];
        MultilayerModel::new(DMatrix::zeros(n, rank), factors, layers, lambda).unwrap()
    }

    #[test]
    fn objective_exact_model_is_zero() {
        let (data, truth) = orthogonal_instance(4, 2, 6, 2, 1);
        let obj = objective(&truth, &data).unwrap();
        assert!(obj.abs() < 1e-18, "objective {obj}");
    }

    #[test]
    fn objective_hand_value() {
        // X = e1 e1^T; model fits e1 e1^T + e2 e2^T, so RSS = 1 and the
        // penalty term vanishes by orthogonality.
        let x = DenseTensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let data = MultimodalDataset::new(vec![vec![Some(x)]], None).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0]);
        let model = MultilayerModel::new(
            DMatrix::from_element(1, 1, 1.0),
            vec![vec![
                DMatrix::from_columns(&[e1.clone()]),
                DMatrix::from_columns(&[e1]),
            ]],
            vec![vec![e2.clone(), e2]],
            7.0,
        )
        .unwrap();
        let obj = objective(&model, &data).unwrap();
        assert!((obj - 1.0).abs() < 1e-12, "objective {obj}");
    }

    #[test]
    fn objective_penalty_scales_with_lambda() {
        let x = DenseTensor::zeros(&[2, 2]);
        let data = MultimodalDataset::new(vec![vec![Some(x)]], None).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let mk = |lambda: f64| {
            MultilayerModel::new(
                DMatrix::zeros(1, 1),
                vec![vec![
                    DMatrix::from_columns(&[e1.clone()]),
                    DMatrix::from_columns(&[e1.clone()]),
                ]],
                vec![vec![e1.clone(), e1.clone()]],
                lambda,
            )
            .unwrap()
        };
        // S coincides with the basis: objective = ||S||^2 + lambda * 1.
        let o1 = objective(&mk(1.0), &data).unwrap();
        let o5 = objective(&mk(5.0), &data).unwrap();
        assert!((o1 - 2.0).abs() < 1e-12 && (o5 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn weights_zero_for_zero_data() {
        let data = MultimodalDataset::new(
            vec![vec![Some(DenseTensor::zeros(&[3, 3]))]; 4],
            None,
        )
        .unwrap();
        let model = zero_model(4, 1, &[3, 3], 2, 0.0);
        let w = update_population_weights(&model, &data).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_recover_noiseless_against_normal_equation_oracle() {
        let (data, truth) = orthogonal_instance(5, 1, 6, 2, 7);
        // zero out the layers so X = C w^T exactly per subject
        let mut truth = truth;
        for ls in truth.layers.iter_mut() {
            for v in ls.iter_mut() {
                v.fill(0.0);
            }
        }
        let images: Vec<Vec<Option<DenseTensor>>> = (0..5)
            .map(|i| vec![Some(truth.reconstruct_subject(i, 0))])
            .collect();
        let data2 = MultimodalDataset::new(images, None).unwrap();
        let mut probe = truth.clone();
        probe.w = DMatrix::zeros(5, 2);
        let w = update_population_weights(&probe, &data2).unwrap();

        // independent oracle: dense least squares via LU per subject
        let cm = kr_chain(&truth.factors[0]);
        let gram = cm.transpose() * &cm;
        for i in 0..5 {
            let x = data2.image(i, 0).unwrap().vectorize();
            let b = cm.transpose() * x;
            let wi = gram.clone().lu().solve(&b).unwrap();
            // the block solve carries a tiny ridge; allow for it
            assert!((w.row(i).transpose() - &wi).norm() < 1e-5 * (1.0 + wi.norm()));
        }
        drop(data);
    }

    #[test]
    fn weights_identical_modalities_match_single() {
        let (_, truth) = orthogonal_instance(4, 1, 6, 2, 9);
        let img = |i: usize| Some(truth.reconstruct_subject(i, 0));
        let one = MultimodalDataset::new((0..4).map(|i| vec![img(i)]).collect(), None).unwrap();
        let two =
            MultimodalDataset::new((0..4).map(|i| vec![img(i), img(i)]).collect(), None).unwrap();
        let mut m1 = truth.clone();
        m1.w = DMatrix::zeros(4, 2);
        let w1 = update_population_weights(&m1, &one).unwrap();
        let m2 = MultilayerModel::new(
            m1.w.clone(),
            vec![truth.factors[0].clone(), truth.factors[0].clone()],
            truth.layers.clone(),
            truth.lambda_s,
        )
        .unwrap();
        let w2 = update_population_weights(&m2, &two).unwrap();
        assert!((&w1 - &w2).norm() < 1e-9);
    }

    #[test]
    fn modality_mbi_drives_residual_down_without_penalty() {
        let (data, truth) = orthogonal_instance(6, 1, 6, 2, 11);
        let mut rng = StdRng::seed_from_u64(0);
        let mut model = truth.clone();
        model.lambda_s = 0.0;
        model.factors[0] = (0..2)
            .map(|_| crate::linalg::random_unit_factor(&mut rng, 6, 2))
            .collect();
        // keep the true layers, alternate W solves and factor MBI steps
        for _ in 0..200 {
            model.w = update_population_weights(&model, &data).unwrap();
            let (next, _) = update_modality_factors_mbi(&model, &data, 0).unwrap();
            model = next;
        }
        model.w = update_population_weights(&model, &data).unwrap();
        let obj = objective(&model, &data).unwrap();
        let total: f64 = (0..6)
            .map(|i| data.image(i, 0).unwrap().squared_norm())
            .sum();
        assert!(obj <= 1e-8 * total, "objective {obj} vs norm {total}");
    }

    #[test]
    fn modality_mbi_breaks_ties_toward_first_mode() {
        // symmetric data and symmetric current factors: both candidates give
        // the same improvement, mode 1 must win
        let vals = vec![2.0, 1.0, 1.0, 2.0];
        let x = DenseTensor::new(vec![2, 2], vals).unwrap();
        let data = MultimodalDataset::new(vec![vec![Some(x)]], None).unwrap();
        let f = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let model = MultilayerModel::new(
            DMatrix::from_element(1, 1, 1.0),
            vec![vec![f.clone(), f]],
            vec![vec![DVector::zeros(2), DVector::zeros(2)]],
            0.0,
        )
        .unwrap();
        let (_, chosen) = update_modality_factors_mbi(&model, &data, 0).unwrap();
        assert_eq!(chosen, 0);
    }

    #[test]
    fn orthogonality_penalty_shrinks_cross_products() {
        let (data, truth) = orthogonal_instance(4, 1, 6, 2, 13);
        // contaminate the layers so they overlap the basis support
        let mut model = truth.clone();
        for ls in model.layers.iter_mut() {
            ls[0] = DVector::from_fn(6, |j, _| 1.0 + j as f64 / 10.0).normalize();
        }
        let cross = |m: &MultilayerModel| cross_penalty(m);
        let mut weak = model.clone();
        weak.lambda_s = 0.0;
        let (weak, _) = update_modality_factors_mbi(&weak, &data, 0).unwrap();
        let mut strong = model.clone();
        strong.lambda_s = 1e3;
        let (strong, _) = update_modality_factors_mbi(&strong, &data, 0).unwrap();
        assert!(
            cross(&strong) < cross(&weak),
            "strong {} weak {}",
            cross(&strong),
            cross(&weak)
        );
    }

    #[test]
    fn layer_stays_zero_on_zero_residual() {
        let (_, truth) = orthogonal_instance(3, 1, 6, 2, 15);
        let mut model = truth.clone();
        for ls in model.layers.iter_mut() {
            for v in ls.iter_mut() {
                v.fill(0.0);
            }
        }
        let images: Vec<Vec<Option<DenseTensor>>> = (0..3)
            .map(|i| vec![Some(model.reconstruct_subject(i, 0))])
            .collect();
        let data = MultimodalDataset::new(images, None).unwrap();
        let (next, _) = update_individual_layer_mbi(&model, &data, 0).unwrap();
        assert!(next.layers[0].iter().all(|v| v.norm_squared() == 0.0));
    }

    #[test]
    fn layer_recovers_rank1_residual_against_svd_oracle() {
        // no modality bases at all: the layer update must converge to the
        // dominant rank-1 part of the image, i.e. its leading singular triple
        let mut rng = StdRng::seed_from_u64(17);
        let u = unit((0..7).map(|_| rng.random_range(-1.0..1.0)).collect());
        let v = unit((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        let x = outer_rank1(&[3.0 * u.clone(), v.clone()]).unwrap();
        let data = MultimodalDataset::new(vec![vec![Some(x.clone())]], None).unwrap();
        let mut model = MultilayerModel::new(
            DMatrix::zeros(1, 0),
            vec![vec![DMatrix::zeros(7, 0), DMatrix::zeros(5, 0)]],
            vec![vec![DVector::zeros(7), DVector::zeros(5)]],
            0.0,
        )
        .unwrap();
        for _ in 0..50 {
            let (next, _) = update_individual_layer_mbi(&model, &data, 0).unwrap();
            model = next;
        }
        let approx = outer_rank1(&model.layers[0].clone()).unwrap();
        // oracle: leading singular triple from an SVD of the matrix form
        let svd = x.matricize(0).unwrap().svd(true, true);
        let sigma = svd.singular_values[0];
        assert!((sigma - 3.0).abs() < 1e-10);
        let err = x.sub(&approx).unwrap().squared_norm();
        assert!(err <= 1e-12 * x.squared_norm(), "err {err}");
    }

    #[test]
    fn layer_identical_modalities_match_single() {
        let mut rng = StdRng::seed_from_u64(19);
        let u = unit((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let v = unit((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let x = outer_rank1(&[2.0 * u, v]).unwrap();
        let one = MultimodalDataset::new(vec![vec![Some(x.clone())]], None).unwrap();
        let two = MultimodalDataset::new(vec![vec![Some(x.clone()), Some(x)]], None).unwrap();
        let mk = |mods: usize| {
            MultilayerModel::new(
                DMatrix::zeros(1, 0),
                vec![vec![DMatrix::zeros(6, 0), DMatrix::zeros(6, 0)]; mods],
                vec![vec![DVector::zeros(6), DVector::zeros(6)]],
                0.0,
            )
            .unwrap()
        };
        let mut m1 = mk(1);
        let mut m2 = mk(2);
        for _ in 0..30 {
            m1 = update_individual_layer_mbi(&m1, &one, 0).unwrap().0;
            m2 = update_individual_layer_mbi(&m2, &two, 0).unwrap().0;
        }
        let t1 = m1.layer_tensor(0);
        let t2 = m2.layer_tensor(0);
        assert!(t1.sub(&t2).unwrap().squared_norm() < 1e-18);
    }

    #[test]
    fn fit_recovers_orthogonal_instance() {
        let (data, truth) = orthogonal_instance(8, 2, 6, 2, 21);
        let opts = FitOptions {
            modality_tol: 1e-8,
            subject_tol: 1e-10,
            outer_tol: 1e-8,
            restarts: 3,
            ..FitOptions::default()
        };
        let (model, report) = fit(&data, 2, 1.0, &opts).unwrap();
        assert!(report.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        let mut total = 0.0;
        let mut err = 0.0;
        for i in 0..8 {
            for m in 0..2 {
                let x = data.image(i, m).unwrap();
                total += x.squared_norm();
                err += x
                    .sub(&model.reconstruct_subject(i, m))
                    .unwrap()
                    .squared_norm();
            }
        }
        assert!(err <= 1e-4 * total, "relative error {}", err / total);
        // individual layers line up with the truth
        for i in 0..8 {
            let est = model.layer_tensor(i);
            let tru = truth.layer_tensor(i);
            let cos = est.inner(&tru).unwrap()
                / (est.frobenius_norm() * tru.frobenius_norm()).max(f64::MIN_POSITIVE);
            assert!(cos > 0.99, "subject {i} cosine {cos}");
        }
    }

    #[test]
    fn fit_zero_data_converges_immediately() {
        let data = MultimodalDataset::new(
            vec![vec![Some(DenseTensor::zeros(&[4, 4])), Some(DenseTensor::zeros(&[4, 4]))]; 3],
            None,
        )
        .unwrap();
        let (model, report) = fit(&data, 2, 1.0, &FitOptions::default()).unwrap();
        assert_eq!(report.outer_iterations, 1);
        assert!(report.converged);
        assert_eq!(*report.objective_trace.last().unwrap(), 0.0);
        assert!(model.w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_single_modality_frozen_matches_homogeneous_baseline() {
        let (data, _) = orthogonal_instance(6, 1, 6, 2, 23);
        // strip the individual layers: data is exactly rank 2 per the bases
        let mut truth = orthogonal_instance(6, 1, 6, 2, 23).1;
        for ls in truth.layers.iter_mut() {
            for v in ls.iter_mut() {
                v.fill(0.0);
            }
        }
        let images: Vec<Vec<Option<DenseTensor>>> = (0..6)
            .map(|i| vec![Some(truth.reconstruct_subject(i, 0))])
            .collect();
        let pure = MultimodalDataset::new(images, None).unwrap();
        let opts = FitOptions {
            freeze_individual_layers: true,
            modality_tol: 1e-10,
            outer_tol: 1e-10,
            ..FitOptions::default()
        };
        let (model, _) = fit(&pure, 2, 0.0, &opts).unwrap();
        let obj = objective(&model, &pure).unwrap();

        let aligned = pure.aligned_modality(0);
        let (hm, hrep) = crate::hocpd::fit_hocpd(&aligned, 2, &crate::hocpd::HocpdOptions::default())
            .unwrap();
        let hobj = *hrep.objective_trace.last().unwrap();
        let scale = aligned.squared_norm();
        assert!(obj <= 1e-8 * scale, "multilayer {obj}");
        assert!(hobj <= 1e-8 * scale, "baseline {hobj}");
        let _ = hm;
        drop(data);
    }

    #[test]
    fn fit_is_equivariant_under_data_scaling() {
        let (data, _) = orthogonal_instance(5, 2, 6, 2, 25);
        let scaled = data.scaled(2.0);
        let opts = FitOptions {
            max_outer: 4,
            max_inner: 5,
            modality_tol: 0.0,
            subject_tol: 0.0,
            outer_tol: 0.0,
            restarts: 1,
            ..FitOptions::default()
        };
        // scale lives in the weights and layers, not the bases, so the same
        // penalty weight keeps the whole objective proportional
        let (m1, _) = fit(&data, 2, 1.0, &opts).unwrap();
        let (m2, _) = fit(&scaled, 2, 1.0, &opts).unwrap();
        for i in 0..5 {
            for m in 0..2 {
                let a = m1.reconstruct_subject(i, m);
                let b = m2.reconstruct_subject(i, m);
                for (x, y) in a.values().iter().zip(b.values()) {
                    assert!(
                        (2.0 * x - y).abs() <= 1e-9 * (1.0 + y.abs()),
                        "mismatch {x} {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn features_hand_example() {
        let mut model = zero_model(1, 2, &[2, 2], 1, 0.0);
        model.layers[0] = vec![
            DVector::from_vec(vec![3.0, 0.0]),
            DVector::from_vec(vec![0.0, 4.0]),
        ];
        model.w[(0, 0)] = 2.0;
        let mut m = model.clone();
        finalize(&mut m);
        let f = m.extract_features(0).unwrap();
        assert!((f.individual_weight - 12.0).abs() < 1e-12);
        assert!((&f.individual_factors[0] - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-12);
        assert!((&f.individual_factors[1] - DVector::from_vec(vec![0.0, 1.0])).norm() < 1e-12);
        assert_eq!(f.len(), 2 * 1 + 1 + 4);
        assert_eq!(f.to_vec().len(), f.len());
        // weights carry the absorbed scales; the factor columns were e1/e2
        // with unit norm already, so the weight is unchanged
        assert!((f.modality_weights[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn new_subject_zero_images_give_zero_features() {
        let (data, _) = orthogonal_instance(4, 2, 6, 2, 27);
        let (model, _) = fit(&data, 2, 1.0, &FitOptions::default()).unwrap();
        let zeros = vec![DenseTensor::zeros(&[6, 6]); 2];
        let f = model.fit_new_subject(&zeros).unwrap();
        assert!(f.modality_weights.iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(f.individual_weight, 0.0);
    }

    #[test]
    fn new_subject_matches_training_subject() {
        let (data, _) = orthogonal_instance(8, 2, 6, 2, 29);
        let opts = FitOptions {
            modality_tol: 1e-9,
            subject_tol: 1e-11,
            outer_tol: 1e-9,
            restarts: 3,
            ..FitOptions::default()
        };
        let (model, _) = fit(&data, 2, 1.0, &opts).unwrap();
        let trained = model.extract_features(0).unwrap().to_vec();
        let refit = model
            .fit_new_subject(&data.subject_images(0).unwrap())
            .unwrap()
            .to_vec();
        let denom = trained.norm().max(1.0);
        assert!(
            (&trained - &refit).norm() / denom < 1e-4,
            "feature gap {}",
            (&trained - &refit).norm() / denom
        );
    }

    #[test]
    fn stationarity_gap_small_after_fit() {
        let (data, _) = orthogonal_instance(5, 2, 6, 2, 31);
        let opts = FitOptions {
            modality_tol: 1e-10,
            subject_tol: 1e-12,
            outer_tol: 1e-10,
            ..FitOptions::default()
        };
        let (model, _) = fit(&data, 2, 1.0, &opts).unwrap();
        let gap = block_stationarity_gap(&model, &data).unwrap();
        assert!(gap < 1e-6, "gap {gap}");
    }

    #[test]
    fn model_dir_round_trip() {
        let (data, _) = orthogonal_instance(3, 2, 4, 2, 33);
        let (model, _) = fit(&data, 2, 0.5, &FitOptions { restarts: 1, ..Default::default() })
            .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        model.save_dir(tmp.path()).unwrap();
        let back = MultilayerModel::load_dir(tmp.path()).unwrap();
        assert_eq!(back.rank(), model.rank());
        assert!(back.finalized);
        assert!((&back.w - &model.w).norm() == 0.0);
        for m in 0..2 {
            for d in 0..2 {
                assert!((&back.factors[m][d] - &model.factors[m][d]).norm() == 0.0);
            }
        }
        let a = model.extract_features(1).unwrap().to_vec();
        let b = back.extract_features(1).unwrap().to_vec();
        assert!((a - b).norm() == 0.0);
    }

    #[test]
    fn fit_rejects_bad_arguments() {
        let (data, _) = orthogonal_instance(3, 1, 4, 2, 35);
        assert!(fit(&data, 0, 1.0, &FitOptions::default()).is_err());
        assert!(fit(&data, 5, 1.0, &FitOptions::default()).is_err());
        assert!(fit(&data, 2, -1.0, &FitOptions::default()).is_err());
    }
}
