//! Radius-density clustering: points with enough neighbours inside the radius
//! are cores, clusters grow through density-reachable points, everything else
//! is an outlier.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClusterAssignment, ClusterConfig};
use crate::error::{bail, Result};
use crate::math::DenseMatrix;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Radius used when the config leaves it open: twice the median distance
/// from a point to its `(min_cluster_size - 1)`-th nearest neighbour, over a
/// seeded sample of at most 512 points.
pub fn estimate_radius(points: &DenseMatrix, min_cluster_size: usize, seed: u64) -> f64 {
    let n = points.rows();
    let mut sample: Vec<usize> = (0..n).collect();
    if n > 512 {
        sample.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        sample.truncate(512);
    }
    let rank = min_cluster_size.saturating_sub(1).clamp(1, n.saturating_sub(1).max(1));
    let mut kd: Vec<f64> = sample
        .iter()
        .map(|&i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(points.row(i), points.row(j))).collect();
            if d.is_empty() {
                return 0.0;
            }
            d.sort_by(f64::total_cmp);
            libm::sqrt(d[(rank - 1).min(d.len() - 1)])
        })
        .collect();
    kd.sort_by(f64::total_cmp);
    2.0 * kd[kd.len() / 2]
}

/// Clusters `points` (one row each). Cluster ids follow the scan order in
/// which their first core point is met; `None` marks outliers.
pub fn density_cluster(points: &DenseMatrix, cfg: &ClusterConfig) -> Result<ClusterAssignment> {
    cfg.validate()?;
    let n = points.rows();
    if n < cfg.min_cluster_size {
        bail!(Data, "{n} points cannot form a cluster of at least {}", cfg.min_cluster_size);
    }
    let radius = match cfg.neighborhood_radius {
        Some(r) => r,
        None => estimate_radius(points, cfg.min_cluster_size, cfg.seed),
    };
    let r2 = radius * radius;
    let neighbours: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| sq_dist(points.row(i), points.row(j)) <= r2).collect()).collect();
    // neighbour counts include the point itself
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= cfg.min_cluster_size).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut k = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(k);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(k);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        k += 1;
    }
    ClusterAssignment::from_labels(points, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(radius: f64) -> ClusterConfig {
        ClusterConfig { neighborhood_radius: Some(radius), ..ClusterConfig::default() }
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = DenseMatrix::from_fn(8, 2, |_, j| j as f64);
        let a = density_cluster(&pts, &cfg(0.1)).unwrap();
        assert_eq!(a.k, 1);
        assert!(a.labels.iter().all(|&l| l == Some(0)));
    }

    #[test]
    fn far_point_is_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows: Vec<Vec<f64>> =
            (0..20).map(|_| vec![rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]).collect();
        rows.push(vec![100.0, 0.0]);
        let a = density_cluster(&DenseMatrix::from_rows(&rows).unwrap(), &cfg(1.0)).unwrap();
        assert_eq!(a.k, 1);
        assert_eq!(a.labels[20], None);
        assert!(a.labels[..20].iter().all(|&l| l == Some(0)));
    }

    #[test]
    fn ids_follow_scan_order() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![if i % 2 == 0 { 10.0 } else { 0.0 }, 0.0]).collect();
        let a = density_cluster(&DenseMatrix::from_rows(&rows).unwrap(), &cfg(0.5)).unwrap();
        assert_eq!(a.labels[0], Some(0));
        assert_eq!(a.labels[1], Some(1));
    }

    #[test]
    fn too_few_points() {
        let pts = DenseMatrix::zeros(3, 2);
        assert!(matches!(density_cluster(&pts, &cfg(1.0)), Err(crate::Error::Data(_))));
    }
}
