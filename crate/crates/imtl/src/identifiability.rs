//! Kruskal-rank computation and the sufficient uniqueness condition for the
//! multilayer decomposition.
//!
//! For each mode the population basis columns and the individual-layer
//! vectors of a small subject subset are stacked into one matrix; the
//! decomposition is identifiable (up to the usual scaling) when the summed
//! k-ranks reach `2R + n + D`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multilayer::MultilayerModel;

/// Beyond this many columns subset enumeration is replaced by the generic
/// estimate `min(rank, ncols)`.
pub const EXACT_COLUMN_LIMIT: usize = 20;

const SV_RTOL: f64 = 1e-10;

fn subset_rank(a: &DMatrix<f64>, cols: &[usize]) -> usize {
    let sub = a.select_columns(cols.iter());
    let svals = sub.singular_values();
    let max = svals.max();
    if max <= 0.0 {
        return 0;
    }
    svals.iter().filter(|&&s| s > SV_RTOL * max).count()
}

fn full_rank(a: &DMatrix<f64>) -> usize {
    let cols: Vec<usize> = (0..a.ncols()).collect();
    subset_rank(a, &cols)
}

/// The k-rank and whether it was computed exactly. Matrices wider than
/// [`EXACT_COLUMN_LIMIT`] get the generic estimate `min(rank, ncols)`.
pub fn k_rank_detailed(a: &DMatrix<f64>) -> (usize, bool) {
    let ncols = a.ncols();
    assert!(ncols >= 1, "matrix needs at least one column");
    if (0..ncols).any(|c| a.column(c).norm() == 0.0) {
        return (0, true);
    }
    if ncols > EXACT_COLUMN_LIMIT {
        return (full_rank(a).min(ncols), false);
    }
    let cap = a.nrows().min(ncols);
    let mut k = 0;
    for size in 1..=cap {
        if all_subsets_independent(a, size) {
            k = size;
        } else {
            return (k, true);
        }
    }
    (k, true)
}

/// Largest `k` such that every `k`-column subset is linearly independent.
pub fn k_rank(a: &DMatrix<f64>) -> usize {
    k_rank_detailed(a).0
}

fn all_subsets_independent(a: &DMatrix<f64>, size: usize) -> bool {
    let n = a.ncols();
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        if subset_rank(a, &idx) < size {
            return false;
        }
        // next combination in lexicographic order
        let mut i = size;
        loop {
            if i == 0 {
                return true;
            }
            i -= 1;
            if idx[i] < n - (size - i) {
                idx[i] += 1;
                for j in i + 1..size {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityIdentifiability {
    pub modality: usize,
    /// k-rank of the stacked factor matrix per mode.
    pub k_ranks: Vec<usize>,
    /// Whether each k-rank came from exhaustive subset enumeration.
    pub exact: Vec<bool>,
    pub k_rank_sum: usize,
    pub satisfied: bool,
}

/// Outcome of the sufficient-condition check. `satisfied` requires every
/// modality to pass; the single-modality statement is applied per modality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub rank: usize,
    pub n_modes: usize,
    pub subset: Vec<usize>,
    /// `2R + n + D`.
    pub threshold: usize,
    pub per_modality: Vec<ModalityIdentifiability>,
    pub satisfied: bool,
}

/// Checks the sufficient uniqueness condition on a subject subset of size
/// `n >= 2`: per modality and mode, stack `[b_1^d ... b_R^d s_1^d ... s_n^d]`
/// and require the summed k-ranks to reach `2R + n + D`.
pub fn check_identifiability(
    model: &MultilayerModel,
    subset: &[usize],
) -> Result<IdentifiabilityReport> {
    let n = subset.len();
    if n < 2 || n > model.n_subjects() {
        return Err(Error::InvalidArgument(format!(
            "subset size {n} outside 2..={}",
            model.n_subjects()
        )));
    }
    if let Some(&i) = subset.iter().find(|&&i| i >= model.n_subjects()) {
        return Err(Error::InvalidArgument(format!("subject {i} out of range")));
    }
    let eff = model.effective();
    let rank = eff.rank();
    let dims = eff.dims();
    let d_modes = dims.len();
    let threshold = 2 * rank + n + d_modes;

    let mut per_modality = Vec::new();
    for (m, fs) in eff.factors.iter().enumerate() {
        let mut k_ranks = Vec::with_capacity(d_modes);
        let mut exact = Vec::with_capacity(d_modes);
        for (d, &p) in dims.iter().enumerate() {
            let mut stacked = DMatrix::zeros(p, rank + n);
            stacked.view_mut((0, 0), (p, rank)).copy_from(&fs[d]);
            for (j, &i) in subset.iter().enumerate() {
                stacked.column_mut(rank + j).copy_from(&eff.layers[i][d]);
            }
            let (k, is_exact) = k_rank_detailed(&stacked);
            k_ranks.push(k);
            exact.push(is_exact);
        }
        let sum: usize = k_ranks.iter().sum();
        per_modality.push(ModalityIdentifiability {
            modality: m,
            k_ranks,
            exact,
            k_rank_sum: sum,
            satisfied: sum >= threshold,
        });
    }
    let satisfied = per_modality.iter().all(|r| r.satisfied);
    Ok(IdentifiabilityReport {
        rank,
        n_modes: d_modes,
        subset: subset.to_vec(),
        threshold,
        per_modality,
        satisfied,
    })
}
