//! Text-to-audio retrieval metrics: truncated mean average precision and
//! recall at k, under multi-positive or single-positive relevance.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math::SimilarityMatrix;

/// Gallery ids sorted by descending score; equal scores keep ascending id.
pub fn rank_gallery(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check(relevant: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        bail!(Contract, "cutoff k must be at least 1");
    }
    if relevant.is_empty() {
        bail!(Data, "query has no relevant items");
    }
    Ok(())
}

/// `1/min(|R|, k) * sum over relevant ranks r <= k of precision@r`.
///
/// `relevant` may be unsorted but must not contain duplicates.
pub fn average_precision_at_k(ranking: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    check(relevant, k)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

/// `|relevant in top k| / |relevant|`.
pub fn recall_at_k(ranking: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    check(relevant, k)?;
    let hits = ranking.iter().take(k).filter(|id| relevant.contains(id)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Relevant gallery (audio) items per caption query.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    /// The audio item each caption was written for.
    pub paired: Vec<usize>,
    /// All audio items counted as relevant; always contains `paired`.
    pub relevant: Vec<Vec<usize>>,
}

impl RelevanceMap {
    /// Validates ids against a gallery of `gallery` items. The paired item is
    /// added to its relevance set if missing; duplicates are dropped.
    pub fn new(paired: Vec<usize>, relevant: Vec<Vec<usize>>, gallery: usize) -> Result<Self> {
        if paired.len() != relevant.len() {
            bail!(Contract, "{} paired items for {} relevance sets", paired.len(), relevant.len());
        }
        let mut sets = Vec::with_capacity(relevant.len());
        for (q, (&p, mut set)) in paired.iter().zip(relevant).enumerate() {
            set.push(p);
            set.sort_unstable();
            set.dedup();
            if let Some(&bad) = set.iter().find(|&&id| id >= gallery) {
                bail!(Data, "query {q} lists gallery item {bad}, gallery has {gallery}");
            }
            sets.push(set);
        }
        Ok(Self { paired, relevant: sets })
    }

    /// One positive per query.
    pub fn single(paired: Vec<usize>, gallery: usize) -> Result<Self> {
        let sets = vec![Vec::new(); paired.len()];
        Self::new(paired, sets, gallery)
    }

    pub fn queries(&self) -> usize {
        self.paired.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationMode {
    Multiple,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub map_at_10: f64,
    pub map_at_16: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub query_count: usize,
}

/// Scores every caption query (a column of `sim`) against the audio gallery
/// (its rows) and averages the metrics over queries.
pub fn evaluate(sim: &SimilarityMatrix, relevance: &RelevanceMap, mode: AnnotationMode) -> Result<MetricsReport> {
    if sim.cols() != relevance.queries() {
        bail!(Contract, "{} caption columns but {} relevance entries", sim.cols(), relevance.queries());
    }
    if let Some(&bad) = relevance.relevant.iter().flatten().find(|&&id| id >= sim.rows()) {
        bail!(Contract, "relevant item {bad} outside gallery of {}", sim.rows());
    }
    let mut report = MetricsReport {
        map_at_10: 0.0,
        map_at_16: 0.0,
        r_at_1: 0.0,
        r_at_5: 0.0,
        r_at_10: 0.0,
        query_count: sim.cols(),
    };
    let mut scores = vec![0.0; sim.rows()];
    for q in 0..sim.cols() {
        for (i, s) in scores.iter_mut().enumerate() {
            *s = sim.get(i, q);
        }
        let ranking = rank_gallery(&scores);
        let single = [relevance.paired[q]];
        let rel: &[usize] = match mode {
            AnnotationMode::Multiple => &relevance.relevant[q],
            AnnotationMode::Single => &single,
        };
        report.map_at_10 += average_precision_at_k(&ranking, rel, 10)?;
        report.map_at_16 += average_precision_at_k(&ranking, rel, 16)?;
        report.r_at_1 += recall_at_k(&ranking, rel, 1)?;
        report.r_at_5 += recall_at_k(&ranking, rel, 5)?;
        report.r_at_10 += recall_at_k(&ranking, rel, 10)?;
    }
    if sim.cols() > 0 {
        let n = sim.cols() as f64;
        report.map_at_10 /= n;
        report.map_at_16 /= n;
        report.r_at_1 /= n;
        report.r_at_5 /= n;
        report.r_at_10 /= n;
    }
    Ok(report)
}
