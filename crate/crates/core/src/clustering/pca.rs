//! Principal-component projection backed by a cyclic Jacobi eigensolver.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math::{dot, DenseMatrix};

/// Eigen-decomposition of a symmetric matrix: eigenvalues in descending
/// order and the matching unit eigenvectors as rows.
pub fn symmetric_eigen(sym: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = sym.rows();
    if sym.cols() != n {
        bail!(Contract, "eigen-decomposition needs a square matrix");
    }
    let mut a = sym.clone();
    let mut v = DenseMatrix::identity(n);
    let scale: f64 = a.values().iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| {
                let x = a.get(i, j);
                x * x
            })
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = DenseMatrix::from_fn(n, n, |r, k| v.get(k, order[r]));
    Ok((values, vectors))
}

/// Fitted projection onto the leading principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `reduced_dim x d`, rows ordered by descending variance, each with its
    /// largest-magnitude loading positive.
    pub components: DenseMatrix,
    /// Variance captured by each component (sample covariance, `N - 1`).
    pub explained_variance: Vec<f64>,
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
}

impl Pca {
    pub fn fit(data: &DenseMatrix, reduced_dim: usize) -> Result<Self> {
        let (n, d) = data.shape();
        if reduced_dim == 0 || reduced_dim > n.min(d) {
            bail!(Config, "reduced_dim {reduced_dim} must lie in 1..={}", n.min(d));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(data.row(i)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DenseMatrix::from_fn(n, d, |i, j| data.get(i, j) - mean[j]);
        let denom = n.saturating_sub(1).max(1) as f64;
        let mut cov = DenseMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let s: f64 = (0..n).map(|i| centered.get(i, a) * centered.get(i, b)).sum::<f64>() / denom;
                cov.set(a, b, s);
                cov.set(b, a, s);
            }
        }
        let (values, vectors) = symmetric_eigen(&cov)?;
        let mut components = DenseMatrix::zeros(reduced_dim, d);
        for r in 0..reduced_dim {
            let row = vectors.row(r);
            let mut lead = 0;
            for (k, x) in row.iter().enumerate() {
                if x.abs() > row[lead].abs() {
                    lead = k;
                }
            }
            let sign = if row[lead] < 0.0 { -1.0 } else { 1.0 };
            components.row_mut(r).iter_mut().zip(row).for_each(|(c, x)| *c = sign * x);
        }
        Ok(Self {
            mean,
            components,
            explained_variance: values[..reduced_dim].iter().map(|v| v.max(0.0)).collect(),
            total_variance: values.iter().map(|v| v.max(0.0)).sum(),
        })
    }

    pub fn transform(&self, data: &DenseMatrix) -> Result<DenseMatrix> {
        if data.cols() != self.mean.len() {
            bail!(Contract, "data width {} does not match fitted width {}", data.cols(), self.mean.len());
        }
        let mut centered = vec![0.0; self.mean.len()];
        Ok(DenseMatrix::from_fn(data.rows(), self.components.rows(), |i, r| {
            if r == 0 {
                centered.iter_mut().zip(data.row(i)).zip(&self.mean).for_each(|((c, x), m)| *c = x - m);
            }
            dot(self.components.row(r), &centered)
        }))
    }
}

/// Centers the data and projects it onto its top `reduced_dim` principal
/// directions.
pub fn reduce_dimensionality(embeddings: &DenseMatrix, reduced_dim: usize) -> Result<DenseMatrix> {
    Pca::fit(embeddings, reduced_dim)?.transform(embeddings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
    }

    #[test]
    fn lossless_when_data_spans_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // 20 points in a random 3-dim subspace of R^7
        let basis = DenseMatrix::from_fn(3, 7, |_, _| rng.gen_range(-1.0..1.0));
        let coords = DenseMatrix::from_fn(20, 3, |_, _| rng.gen_range(-2.0..2.0));
        let data = DenseMatrix::from_fn(20, 7, |i, j| (0..3).map(|k| coords.get(i, k) * basis.get(k, j)).sum());
        let reduced = reduce_dimensionality(&data, 3).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                assert!((dist(data.row(i), data.row(j)) - dist(reduced.row(i), reduced.row(j))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_points_keep_their_distance() {
        let data = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let r = reduce_dimensionality(&data, 1).unwrap();
        assert!((dist(data.row(0), data.row(1)) - (r.get(0, 0) - r.get(1, 0)).abs()).abs() < 1e-12);
    }

    #[test]
    fn sign_convention_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = DenseMatrix::from_fn(40, 4, |_, j| rng.gen_range(-1.0..1.0) * (4 - j) as f64);
        let pca = Pca::fit(&data, 4).unwrap();
        assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        for r in 0..4 {
            let row = pca.components.row(r);
            let lead = row.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn too_many_dims_is_config_error() {
        let data = DenseMatrix::zeros(3, 5);
        assert!(matches!(reduce_dimensionality(&data, 4), Err(crate::Error::Config(_))));
        assert!(matches!(reduce_dimensionality(&data, 0), Err(crate::Error::Config(_))));
    }
}
