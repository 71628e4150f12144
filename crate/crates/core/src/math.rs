//! Dense matrices and the probabilistic kernels built on them: cosine
//! similarity, temperature softmax and cross-entropy.
//!
//! Everything is `f64`; the temperature used for retrieval (0.05) pushes
//! probabilities far below `f32` resolution.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Floor applied to predicted probabilities inside `ln`.
pub const LOG_EPS: f64 = 1e-12;

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// Cosine similarities with audio items on rows and captions on columns.
pub type SimilarityMatrix = DenseMatrix;

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            bail!(Contract, "matrix {rows}x{cols} needs {} values, got {}", rows * cols, values.len());
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            bail!(Domain, "non-finite entry at ({}, {})", pos / cols.max(1), pos % cols.max(1));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Contract, "ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, values }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Dot product of two equally long slices, accumulated left to right.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Rows of features or embeddings tagged with the dataset item they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBatch {
    pub ids: Vec<usize>,
    pub values: DenseMatrix,
}

pub type FeatureBatch = RowBatch;
pub type EmbeddingBatch = RowBatch;

impl RowBatch {
    pub fn new(ids: Vec<usize>, values: DenseMatrix) -> Result<Self> {
        if ids.len() != values.rows() {
            bail!(Contract, "{} ids for {} rows", ids.len(), values.rows());
        }
        Ok(Self { ids, values })
    }

    /// Batch whose ids are the row positions `0..rows`.
    pub fn indexed(values: DenseMatrix) -> Self {
        Self { ids: (0..values.rows()).collect(), values }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }
}

/// Which index a probability distribution runs over.
///
/// Similarity matrices put audio items on rows and captions on columns, so a
/// distribution over audios is a column and a distribution over captions is
/// a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    OverAudios,
    OverCaptions,
}

/// Matrix whose columns (`OverAudios`) or rows (`OverCaptions`) are
/// probability distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    matrix: DenseMatrix,
    axis: Axis,
}

impl ProbabilityMatrix {
    /// Validates that every distribution lies in `[0,1]` and sums to one
    /// within `1e-6`.
    pub fn new(matrix: DenseMatrix, axis: Axis) -> Result<Self> {
        if matrix.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            bail!(Domain, "probability entry outside [0,1]");
        }
        let pm = Self { matrix, axis };
        for d in 0..pm.distribution_count() {
            let s: f64 = (0..pm.distribution_len()).map(|k| pm.at(d, k)).sum();
            if (s - 1.0).abs() > 1e-6 {
                bail!(Domain, "distribution {d} sums to {s}");
            }
        }
        Ok(pm)
    }

    /// Distributions with probability one on the diagonal (positive pairs).
    pub fn one_hot_diagonal(n: usize, axis: Axis) -> Self {
        Self { matrix: DenseMatrix::identity(n), axis }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn distribution_count(&self) -> usize {
        match self.axis {
            Axis::OverAudios => self.matrix.cols(),
            Axis::OverCaptions => self.matrix.rows(),
        }
    }

    pub fn distribution_len(&self) -> usize {
        match self.axis {
            Axis::OverAudios => self.matrix.rows(),
            Axis::OverCaptions => self.matrix.cols(),
        }
    }

    /// Entry `k` of distribution `d`.
    #[inline]
    pub fn at(&self, d: usize, k: usize) -> f64 {
        match self.axis {
            Axis::OverAudios => self.matrix.get(k, d),
            Axis::OverCaptions => self.matrix.get(d, k),
        }
    }
}

/// `C[i][j] = <a_i, c_j> / (|a_i| |c_j|)`.
pub fn cosine_similarity_matrix(audio: &EmbeddingBatch, text: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    if audio.width() != text.width() {
        bail!(Contract, "embedding widths differ: {} vs {}", audio.width(), text.width());
    }
    let a = normalize_rows(audio)?;
    let c = normalize_rows(text)?;
    Ok(DenseMatrix::from_fn(a.rows(), c.rows(), |i, j| dot(a.row(i), c.row(j)).clamp(-1.0, 1.0)))
}

/// Scales each row to unit L2 norm; zero rows are rejected by item id.
pub fn normalize_rows(batch: &EmbeddingBatch) -> Result<DenseMatrix> {
    let mut out = batch.values.clone();
    for i in 0..out.rows() {
        let norm = l2_norm(out.row(i));
        if !(norm > 0.0) {
            bail!(Domain, "embedding of item {} has zero norm", batch.ids[i]);
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        bail!(Config, "temperature must be positive, got {tau}");
    }
    Ok(())
}

/// Log-probabilities of `softmax(x / tau)` along `axis`, computed with
/// max-subtraction.
pub fn log_softmax_with_temperature(logits: &DenseMatrix, tau: f64, axis: Axis) -> Result<DenseMatrix> {
    check_tau(tau)?;
    let mut out = logits.clone();
    let (outer, inner) = match axis {
        Axis::OverAudios => (logits.cols(), logits.rows()),
        Axis::OverCaptions => (logits.rows(), logits.cols()),
    };
    let idx = |d: usize, k: usize| match axis {
        Axis::OverAudios => k * logits.cols() + d,
        Axis::OverCaptions => d * logits.cols() + k,
    };
    let vals = out.values_mut();
    for d in 0..outer {
        let mut max = f64::NEG_INFINITY;
        let mut arg = 0;
        for k in 0..inner {
            vals[idx(d, k)] /= tau;
            if vals[idx(d, k)] > max {
                max = vals[idx(d, k)];
                arg = k;
            }
        }
        // the max term contributes exactly 1; log1p keeps the small remainder
        let mut rest = 0.0;
        for k in (0..inner).filter(|&k| k != arg) {
            rest += libm::exp(vals[idx(d, k)] - max);
        }
        let log_rest = libm::log1p(rest);
        for k in 0..inner {
            vals[idx(d, k)] = (vals[idx(d, k)] - max) - log_rest;
        }
    }
    Ok(out)
}

/// `exp(x / tau) / sum(exp(. / tau))` along `axis`.
pub fn softmax_with_temperature(logits: &DenseMatrix, tau: f64, axis: Axis) -> Result<ProbabilityMatrix> {
    let mut m = log_softmax_with_temperature(logits, tau, axis)?;
    m.values_mut().iter_mut().for_each(|v| *v = libm::exp(*v));
    Ok(ProbabilityMatrix { matrix: m, axis })
}

/// Mean over distributions of `-sum p ln max(q, 1e-12)`.
pub fn cross_entropy(targets: &ProbabilityMatrix, predictions: &ProbabilityMatrix) -> Result<f64> {
    if targets.axis() != predictions.axis() || targets.matrix().shape() != predictions.matrix().shape() {
        bail!(Contract, "targets and predictions disagree in shape or axis");
    }
    let n = targets.distribution_count();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for d in 0..n {
        for k in 0..targets.distribution_len() {
            let p = targets.at(d, k);
            if p > 0.0 {
                total -= p * libm::log(predictions.at(d, k).max(LOG_EPS));
            }
        }
    }
    Ok(total / n as f64)
}

/// Cross-entropy against already computed log-probabilities (no clamp needed).
pub(crate) fn cross_entropy_from_log(targets: &ProbabilityMatrix, log_q: &DenseMatrix) -> f64 {
    let n = targets.distribution_count();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for d in 0..n {
        for k in 0..targets.distribution_len() {
            let p = targets.at(d, k);
            if p > 0.0 {
                let lq = match targets.axis() {
                    Axis::OverAudios => log_q.get(k, d),
                    Axis::OverCaptions => log_q.get(d, k),
                };
                total -= p * lq;
            }
        }
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(rows: &[Vec<f64>]) -> RowBatch {
        RowBatch::indexed(DenseMatrix::from_rows(rows).unwrap())
    }

    #[test]
    fn cosine_examples() {
        let a = batch(&[vec![1.0, 0.0]]);
        assert_eq!(cosine_similarity_matrix(&a, &batch(&[vec![1.0, 0.0]])).unwrap().get(0, 0), 1.0);
        assert_eq!(cosine_similarity_matrix(&a, &batch(&[vec![0.0, 1.0]])).unwrap().get(0, 0), 0.0);
        let c = cosine_similarity_matrix(&a, &batch(&[vec![1.0, 1.0]])).unwrap();
        assert_abs_diff_eq!(c.get(0, 0), core::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-8);
    }

    #[test]
    fn zero_norm_row_names_item() {
        let a = RowBatch::new(vec![42], DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        let err = cosine_similarity_matrix(&a, &batch(&[vec![1.0, 0.0]])).unwrap_err();
        assert!(matches!(err, crate::Error::Domain(ref m) if m.contains("42")), "{err}");
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let err = cosine_similarity_matrix(&batch(&[vec![1.0, 0.0]]), &batch(&[vec![1.0]])).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    #[test]
    fn softmax_examples() {
        let m = DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let p = softmax_with_temperature(&m, 0.05, Axis::OverCaptions).unwrap();
        assert_eq!(p.matrix().row(0), &[0.5, 0.5]);

        let m = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = softmax_with_temperature(&m, 1.0, Axis::OverCaptions).unwrap();
        assert_abs_diff_eq!(p.at(0, 0), 0.73105858, epsilon = 1e-8);
        assert_abs_diff_eq!(p.at(0, 1), 0.26894142, epsilon = 1e-8);

        let p = softmax_with_temperature(&m, 0.05, Axis::OverCaptions).unwrap();
        // 1 / (1 + e^20)
        assert_abs_diff_eq!(p.at(0, 1), 2.0611536181902037e-9, epsilon = 1e-18);
        assert_abs_diff_eq!(p.at(0, 0), 1.0 - 2.0611536181902037e-9, epsilon = 1e-15);
    }

    #[test]
    fn softmax_over_audios_normalizes_columns() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let p = softmax_with_temperature(&m, 1.0, Axis::OverAudios).unwrap();
        assert_abs_diff_eq!(p.matrix().get(0, 0), 0.73105858, epsilon = 1e-8);
        assert_abs_diff_eq!(p.matrix().get(0, 1), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let m = DenseMatrix::zeros(1, 2);
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(matches!(softmax_with_temperature(&m, tau, Axis::OverCaptions), Err(crate::Error::Config(_))));
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = ProbabilityMatrix::one_hot_diagonal(1, Axis::OverCaptions);
        assert_eq!(cross_entropy(&one_hot, &one_hot).unwrap(), 0.0);

        let p =
            ProbabilityMatrix::new(DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap(), Axis::OverCaptions)
                .unwrap();
        let q = ProbabilityMatrix::new(DenseMatrix::from_rows(&[vec![0.25; 4]]).unwrap(), Axis::OverCaptions).unwrap();
        assert_abs_diff_eq!(cross_entropy(&p, &q).unwrap(), 1.38629436, epsilon = 1e-8);

        let u = ProbabilityMatrix::new(DenseMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap(), Axis::OverCaptions).unwrap();
        assert_abs_diff_eq!(cross_entropy(&u, &u).unwrap(), core::f64::consts::LN_2, epsilon = 1e-8);
    }

    #[test]
    fn cross_entropy_shape_mismatch() {
        let a = ProbabilityMatrix::one_hot_diagonal(2, Axis::OverCaptions);
        let b = ProbabilityMatrix::one_hot_diagonal(2, Axis::OverAudios);
        let c = ProbabilityMatrix::one_hot_diagonal(3, Axis::OverCaptions);
        assert!(matches!(cross_entropy(&a, &b), Err(crate::Error::Contract(_))));
        assert!(matches!(cross_entropy(&a, &c), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn matrix_rejects_bad_len_and_nan() {
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
    }
}
