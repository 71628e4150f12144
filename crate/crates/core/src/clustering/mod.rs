//! Pseudo-labels for the auxiliary classification task: principal-component
//! reduction of caption embeddings, radius-density clustering, outlier
//! reassignment by centroid-distance probabilities, and propagation of
//! caption labels to the paired audio items.

pub mod density;
pub mod pca;

use alloc::vec;
use alloc::vec::Vec;

pub use density::{density_cluster, estimate_radius};
pub use pca::{reduce_dimensionality, symmetric_eigen, Pca};

use crate::error::{bail, Result};
use crate::math::DenseMatrix;
use crate::training::PseudoLabels;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub reduced_dim: usize,
    pub min_cluster_size: usize,
    /// `None` estimates the radius from the data (see [`estimate_radius`]).
    pub neighborhood_radius: Option<f64>,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { reduced_dim: 5, min_cluster_size: 5, neighborhood_radius: None, seed: 0 }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduced_dim == 0 {
            bail!(Config, "reduced_dim must be at least 1");
        }
        if self.min_cluster_size < 2 {
            bail!(Config, "min_cluster_size must be at least 2, got {}", self.min_cluster_size);
        }
        if let Some(r) = self.neighborhood_radius {
            if !(r > 0.0) || !r.is_finite() {
                bail!(Config, "neighborhood radius must be positive, got {r}");
            }
        }
        Ok(())
    }
}

/// Cluster membership per point; `None` marks an outlier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    /// `N x K`, softmax of negative centroid distances.
    pub probabilities: DenseMatrix,
    pub k: usize,
    /// `K x r`, mean of each cluster's members.
    pub centroids: DenseMatrix,
}

impl ClusterAssignment {
    pub(crate) fn from_labels(points: &DenseMatrix, labels: Vec<Option<usize>>, k: usize) -> Result<Self> {
        let r = points.cols();
        let mut centroids = DenseMatrix::zeros(k, r);
        let mut counts = vec![0usize; k];
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = *l {
                counts[c] += 1;
                centroids.row_mut(c).iter_mut().zip(points.row(i)).for_each(|(m, x)| *m += x);
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            centroids.row_mut(c).iter_mut().for_each(|m| *m /= n.max(1) as f64);
        }
        let probabilities = centroid_probabilities(points, &centroids);
        Ok(Self { labels, probabilities, k, centroids })
    }

    pub fn outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Labels with every point assigned; fails while outliers remain.
    pub fn hard_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| crate::Error::Data(alloc::format!("point {i} is still an outlier"))))
            .collect()
    }
}

/// Softmax over `-distance` to each centroid, one row per point.
fn centroid_probabilities(points: &DenseMatrix, centroids: &DenseMatrix) -> DenseMatrix {
    let k = centroids.rows();
    let mut out = DenseMatrix::zeros(points.rows(), k);
    if k == 0 {
        return out;
    }
    for i in 0..points.rows() {
        let neg: Vec<f64> = (0..k).map(|c| -libm::sqrt(density::sq_dist(points.row(i), centroids.row(c)))).collect();
        let max = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = neg.iter().map(|v| libm::exp(v - max)).sum();
        for (c, v) in neg.iter().enumerate() {
            out.set(i, c, libm::exp(v - max) / z);
        }
    }
    out
}

/// Gives each outlier the most probable cluster (ties go to the lowest id).
/// Centroids stay those of the original members.
pub fn reassign_outliers(assignment: &ClusterAssignment, points: &DenseMatrix) -> Result<ClusterAssignment> {
    if assignment.k == 0 {
        bail!(Data, "every point is an outlier; increase the neighborhood radius or lower min_cluster_size");
    }
    if points.rows() != assignment.labels.len() || points.cols() != assignment.centroids.cols() {
        bail!(Contract, "points do not match the assignment");
    }
    let probabilities = centroid_probabilities(points, &assignment.centroids);
    let labels = assignment
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.or_else(|| {
                let row = probabilities.row(i);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                Some(best)
            })
        })
        .collect();
    Ok(ClusterAssignment { labels, probabilities, k: assignment.k, centroids: assignment.centroids.clone() })
}

/// Result of the full caption clustering pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionClusters {
    pub reduced: DenseMatrix,
    /// Assignment before outlier reassignment.
    pub raw: ClusterAssignment,
    /// Final assignment, no outliers.
    pub assignment: ClusterAssignment,
}

/// Reduce, cluster, reassign.
pub fn cluster_embeddings(embeddings: &DenseMatrix, cfg: &ClusterConfig) -> Result<CaptionClusters> {
    cfg.validate()?;
    let reduced = reduce_dimensionality(embeddings, cfg.reduced_dim)?;
    let raw = density_cluster(&reduced, cfg)?;
    let assignment = reassign_outliers(&raw, &reduced)?;
    Ok(CaptionClusters { reduced, raw, assignment })
}

/// Caption labels are copied; each audio item takes the majority label of its
/// captions, ties going to the lowest label.
pub fn build_pseudo_labels(
    caption_labels: &[usize],
    k: usize,
    caption_audio: &[usize],
    n_audio: usize,
) -> Result<PseudoLabels> {
    if caption_labels.len() != caption_audio.len() {
        bail!(Contract, "{} caption labels for {} pairings", caption_labels.len(), caption_audio.len());
    }
    if let Some(&bad) = caption_labels.iter().find(|&&l| l >= k) {
        bail!(Data, "caption label {bad} outside [0, {k})");
    }
    let mut votes = vec![vec![0usize; k]; n_audio];
    for (c, (&label, &audio)) in caption_labels.iter().zip(caption_audio).enumerate() {
        if audio >= n_audio {
            bail!(Data, "caption {c} is paired with unknown audio item {audio}");
        }
        votes[audio][label] += 1;
    }
    let mut audio = Vec::with_capacity(n_audio);
    for (a, v) in votes.iter().enumerate() {
        if v.iter().all(|&n| n == 0) {
            bail!(Data, "audio item {a} has no paired caption");
        }
        let mut best = 0;
        for (l, &n) in v.iter().enumerate() {
            if n > v[best] {
                best = l;
            }
        }
        audio.push(best);
    }
    Ok(PseudoLabels { audio, text: caption_labels.to_vec(), k })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn two_centroids() -> ClusterAssignment {
        // centroid A at 0, centroid B at 10; point 2 is an outlier at 1
        let p = pts(&[vec![0.0], vec![10.0], vec![1.0]]);
        ClusterAssignment::from_labels(&p, vec![Some(0), Some(1), None], 2).unwrap()
    }

    #[test]
    fn reassign_nearest_centroid() {
        let p = pts(&[vec![0.0], vec![10.0], vec![1.0]]);
        let a = reassign_outliers(&two_centroids(), &p).unwrap();
        assert_eq!(a.labels, vec![Some(0), Some(1), Some(0)]);
        for i in 0..3 {
            assert!((a.probabilities.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reassign_tie_goes_to_lowest_id() {
        let p = pts(&[vec![0.0], vec![10.0], vec![5.0]]);
        let a = ClusterAssignment::from_labels(&p, vec![Some(0), Some(1), None], 2).unwrap();
        assert_eq!(reassign_outliers(&a, &p).unwrap().labels[2], Some(0));
    }

    #[test]
    fn reassign_without_outliers_keeps_labels() {
        let p = pts(&[vec![0.0], vec![10.0]]);
        let a = ClusterAssignment::from_labels(&p, vec![Some(1), Some(0)], 2).unwrap();
        assert_eq!(reassign_outliers(&a, &p).unwrap().labels, a.labels);
    }

    #[test]
    fn reassign_needs_a_cluster() {
        let p = pts(&[vec![0.0]]);
        let a = ClusterAssignment::from_labels(&p, vec![None], 0).unwrap();
        assert!(matches!(reassign_outliers(&a, &p), Err(crate::Error::Data(_))));
    }

    #[test]
    fn pseudo_label_votes() {
        let l = build_pseudo_labels(&[0, 2, 1], 3, &[0, 1, 2], 3).unwrap();
        assert_eq!(l.audio, vec![0, 2, 1]);
        let l = build_pseudo_labels(&[2, 2, 1, 0, 2], 3, &[0; 5], 1).unwrap();
        assert_eq!(l.audio, vec![2]);
        let l = build_pseudo_labels(&[1, 1, 0, 0], 2, &[0; 4], 1).unwrap();
        assert_eq!(l.audio, vec![0]);
        assert!(matches!(build_pseudo_labels(&[0], 1, &[3], 2), Err(crate::Error::Data(_))));
    }
}
