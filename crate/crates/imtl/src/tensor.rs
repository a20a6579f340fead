//! Dense D-way tensors and the algebra the decompositions are built on.
//!
//! Storage is in vectorization order with the first index varying fastest,
//! so the mode-1 matricization of a tensor is a plain reshape of its buffer.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A dense D-way real tensor with an explicit dimension vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&p| p == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be non-empty and positive, got {dims:?}"
            )));
        }
        let expect: usize = dims.iter().product();
        if values.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "value buffer has length {} but dims {:?} require {}",
                values.len(),
                dims,
                expect
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            values: vec![0.0; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Linear offset of a multi-index (first index fastest).
    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        let mut stride = 1;
        for (i, &p) in idx.iter().zip(&self.dims) {
            debug_assert!(*i < p);
            off += i * stride;
            stride *= p;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let off = self.offset(idx);
        self.values[off] = v;
    }

    /// Mode-d matricization (`mode` is zero-based): a `p_d x prod(p_other)`
    /// matrix where the remaining modes index columns with the lowest mode
    /// varying fastest.
    pub fn matricize(&self, mode: usize) -> Result<DMatrix<f64>> {
        let d = self.ndim();
        if mode >= d {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} out of range for a {d}-way tensor"
            )));
        }
        let rows = self.dims[mode];
        let cols = self.len() / rows;
        if mode == 0 {
            // The buffer already is the column-major layout of the unfolding.
            return Ok(DMatrix::from_column_slice(rows, cols, &self.values));
        }
        let cstride = column_strides(&self.dims, mode);
        let mut out = DMatrix::zeros(rows, cols);
        let mut idx = vec![0usize; d];
        for &v in &self.values {
            let mut col = 0;
            for (k, &i) in idx.iter().enumerate() {
                if k != mode {
                    col += i * cstride[k];
                }
            }
            out[(idx[mode], col)] = v;
            increment_index(&mut idx, &self.dims);
        }
        Ok(out)
    }

    /// Inverse of [`matricize`](Self::matricize).
    pub fn from_matricization(mat: &DMatrix<f64>, dims: &[usize], mode: usize) -> Result<Self> {
        let d = dims.len();
        if mode >= d {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} out of range for a {d}-way tensor"
            )));
        }
        let total: usize = dims.iter().product();
        if mat.nrows() != dims[mode] || mat.nrows() * mat.ncols() != total {
            return Err(Error::ShapeMismatch(format!(
                "matrix {}x{} does not match dims {:?} at mode {}",
                mat.nrows(),
                mat.ncols(),
                dims,
                mode
            )));
        }
        if mode == 0 {
            return DenseTensor::new(dims.to_vec(), mat.as_slice().to_vec());
        }
        let cstride = column_strides(dims, mode);
        let mut values = vec![0.0; total];
        let mut idx = vec![0usize; d];
        for v in values.iter_mut() {
            let mut col = 0;
            for (k, &i) in idx.iter().enumerate() {
                if k != mode {
                    col += i * cstride[k];
                }
            }
            *v = mat[(idx[mode], col)];
            increment_index(&mut idx, dims);
        }
        DenseTensor::new(dims.to_vec(), values)
    }

    /// The vectorization (first index fastest); identical to the buffer.
    pub fn vectorize(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn from_vector(dims: &[usize], v: &DVector<f64>) -> Result<Self> {
        DenseTensor::new(dims.to_vec(), v.as_slice().to_vec())
    }

    pub fn inner(&self, other: &DenseTensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "inner product of tensors with dims {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn add_assign(&mut self, other: &DenseTensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch("add of mismatched tensors".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch("sub of mismatched tensors".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        DenseTensor::new(self.dims.clone(), values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Column strides of the mode-`mode` unfolding: stride of mode `k` is the
/// product of the dimensions of all modes below `k`, skipping `mode`.
fn column_strides(dims: &[usize], mode: usize) -> Vec<usize> {
    let mut strides = vec![0usize; dims.len()];
    let mut acc = 1;
    for (k, &p) in dims.iter().enumerate() {
        if k == mode {
            continue;
        }
        strides[k] = acc;
        acc *= p;
    }
    strides
}

fn increment_index(idx: &mut [usize], dims: &[usize]) {
    for (i, &p) in idx.iter_mut().zip(dims) {
        *i += 1;
        if *i < p {
            return;
        }
        *i = 0;
    }
}

/// Kronecker product `a (x) b`; block `(i,j)` equals `a[(i,j)] * b`.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Khatri-Rao (column-wise Kronecker) product of two matrices with equal
/// column counts.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "Khatri-Rao of matrices with {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    let (m, p, n) = (a.nrows(), b.nrows(), a.ncols());
    let mut out = DMatrix::zeros(m * p, n);
    for c in 0..n {
        for i in 0..m {
            let av = a[(i, c)];
            for k in 0..p {
                out[(i * p + k, c)] = av * b[(k, c)];
            }
        }
    }
    Ok(out)
}

/// Outer product of D vectors, producing a rank-1 D-way tensor.
pub fn outer_rank1(vs: &[DVector<f64>]) -> Result<DenseTensor> {
    if vs.is_empty() {
        return Err(Error::InvalidArgument(
            "outer product of an empty vector list".into(),
        ));
    }
    let dims: Vec<usize> = vs.iter().map(|v| v.len()).collect();
    let mut values = vs[0].as_slice().to_vec();
    for v in &vs[1..] {
        let mut next = Vec::with_capacity(values.len() * v.len());
        for &x in v.as_slice() {
            next.extend(values.iter().map(|&y| y * x));
        }
        values = next;
    }
    DenseTensor::new(dims, values)
}

/// A tensor in CP (Kruskal) form: per-mode factor matrices sharing a common
/// column count, plus optional column weights (absent means all ones).
#[derive(Debug, Clone)]
pub struct KruskalTensor {
    pub weights: Option<DVector<f64>>,
    pub factors: Vec<DMatrix<f64>>,
}

impl KruskalTensor {
    pub fn new(weights: Option<DVector<f64>>, factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument("Kruskal tensor needs D >= 1".into()));
        }
        let r = factors[0].ncols();
        if factors.iter().any(|f| f.ncols() != r) {
            return Err(Error::ShapeMismatch(
                "factor matrices must share a column count".into(),
            ));
        }
        if let Some(w) = &weights {
            if w.len() != r {
                return Err(Error::ShapeMismatch(format!(
                    "{} weights for rank {}",
                    w.len(),
                    r
                )));
            }
        }
        Ok(Self { weights, factors })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    fn weight(&self, r: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[r])
    }

    /// Dense reconstruction via the mode-1 Khatri-Rao identity
    /// `B_(1) = B^1 diag(w) (B^D ⊙ ... ⊙ B^2)^T`.
    pub fn reconstruct(&self) -> DenseTensor {
        let dims = self.dims();
        let r = self.rank();
        let mut lead = self.factors[0].clone();
        if let Some(w) = &self.weights {
            for c in 0..r {
                lead.column_mut(c).scale_mut(w[c]);
            }
        }
        if self.factors.len() == 1 {
            let mut total = DVector::zeros(lead.nrows());
            for c in lead.column_iter() {
                total += c;
            }
            return DenseTensor::new(dims, total.as_slice().to_vec()).expect("consistent dims");
        }
        let co = kr_chain(&self.factors[1..]);
        let mat = lead * co.transpose();
        DenseTensor::from_matricization(&mat, &dims, 0).expect("consistent dims")
    }

    /// Rescales every factor column to unit Euclidean norm, absorbing the
    /// scales (and a sign convention on mode-1 columns) into the weights.
    pub fn normalize(&self) -> Result<KruskalTensor> {
        let r = self.rank();
        let mut factors = self.factors.clone();
        let mut weights = DVector::from_element(r, 0.0);
        for c in 0..r {
            let mut w = self.weight(c);
            for f in factors.iter_mut() {
                let norm = f.column(c).norm();
                if norm == 0.0 {
                    if w != 0.0 {
                        return Err(Error::DegenerateFactor(format!(
                            "zero factor column {c} with nonzero weight"
                        )));
                    }
                } else {
                    f.column_mut(c).scale_mut(1.0 / norm);
                    w *= norm;
                }
            }
            // Sign convention: first nonzero entry of the mode-1 column is
            // non-negative; the compensating sign goes into the weight.
            if let Some(lead) = factors[0].column(c).iter().find(|v| **v != 0.0) {
                if *lead < 0.0 {
                    factors[0].column_mut(c).scale_mut(-1.0);
                    w = -w;
                }
            }
            weights[c] = w;
        }
        KruskalTensor::new(Some(weights), factors)
    }
}

/// Khatri-Rao chain `f[last] ⊙ ... ⊙ f[0]` so that the first matrix in the
/// slice indexes the fastest-varying rows.
pub fn kr_chain(factors: &[DMatrix<f64>]) -> DMatrix<f64> {
    let r = factors[0].ncols();
    let mut acc = DMatrix::from_element(1, r, 1.0);
    for f in factors {
        acc = khatri_rao(f, &acc).expect("equal column counts");
    }
    acc
}

/// Khatri-Rao chain of all factors except `skip`, lowest mode fastest.
pub fn kr_cofactor(factors: &[DMatrix<f64>], skip: usize) -> DMatrix<f64> {
    let r = factors[0].ncols();
    let mut acc = DMatrix::from_element(1, r, 1.0);
    for (d, f) in factors.iter().enumerate() {
        if d != skip {
            acc = khatri_rao(f, &acc).expect("equal column counts");
        }
    }
    acc
}

/// Kronecker chain of vectors excluding `skip`, lowest mode fastest; the
/// vector analogue of [`kr_cofactor`].
pub fn vec_cofactor(vs: &[DVector<f64>], skip: usize) -> DVector<f64> {
    let mut acc = vec![1.0f64];
    for (d, v) in vs.iter().enumerate() {
        if d == skip {
            continue;
        }
        let mut next = Vec::with_capacity(acc.len() * v.len());
        for &x in v.as_slice() {
            next.extend(acc.iter().map(|&y| y * x));
        }
        acc = next;
    }
    DVector::from_vec(acc)
}
