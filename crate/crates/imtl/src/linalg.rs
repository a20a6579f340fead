//! Small shared linear-algebra helpers for the block solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Ridge stabilizer for a (near-)positive-semidefinite normal matrix:
/// `1e-8 * trace / dimension`.
pub fn ridge_epsilon(a: &DMatrix<f64>) -> f64 {
    let dim = a.nrows().max(1) as f64;
    1e-8 * a.trace().abs() / dim
}

/// Cholesky factorization of `a + eps I` with the standard stabilizer,
/// escalating the ridge a few times before giving up.
pub fn ridge_cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let base = ridge_epsilon(a).max(f64::MIN_POSITIVE);
    let mut eps = base;
    for _ in 0..4 {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(chol);
        }
        eps *= 1e4;
    }
    Err(Error::IllConditioned(format!(
        "normal matrix of dimension {} not positive definite",
        a.nrows()
    )))
}

/// A `rows x cols` matrix with i.i.d. standard normal entries and columns
/// rescaled to unit Euclidean norm.
pub fn random_unit_factor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    for c in 0..cols {
        let norm = m.column(c).norm();
        if norm > 0.0 {
            m.column_mut(c).scale_mut(1.0 / norm);
        }
    }
    m
}

/// Best rank-1 approximation of a dense tensor by deterministic alternating
/// updates. Returns unit direction vectors per mode, or `None` for a zero
/// tensor.
pub fn leading_rank1(t: &DenseTensor) -> Option<Vec<DVector<f64>>> {
    if t.squared_norm() == 0.0 {
        return None;
    }
    let d = t.ndim();
    let unfold: Vec<DMatrix<f64>> = (0..d)
        .map(|k| t.matricize(k).expect("valid mode"))
        .collect();
    let mut vs: Vec<DVector<f64>> = t
        .dims()
        .iter()
        .map(|&p| DVector::from_element(p, 1.0 / (p as f64).sqrt()))
        .collect();
    let mut amplitude = 0.0;
    for _ in 0..100 {
        let prev = amplitude;
        for k in 0..d {
            let co = crate::tensor::vec_cofactor(&vs, k);
            let mut v = &unfold[k] * &co;
            let norm = v.norm();
            if norm == 0.0 {
                // projection collapsed; restart from the largest column
                let best = (0..unfold[k].ncols())
                    .max_by(|&a, &b| {
                        unfold[k]
                            .column(a)
                            .norm()
                            .partial_cmp(&unfold[k].column(b).norm())
                            .unwrap()
                    })
                    .unwrap();
                v = unfold[k].column(best).into_owned();
                let n = v.norm();
                if n == 0.0 {
                    return None;
                }
                vs[k] = v / n;
                continue;
            }
            amplitude = norm / crate::tensor::vec_cofactor(&vs, k).norm().max(f64::MIN_POSITIVE);
            vs[k] = v / norm;
        }
        if (amplitude - prev).abs() <= 1e-12 * amplitude.abs().max(1.0) {
            break;
        }
    }
    Some(vs)
}
