//! Weighted fusion of similarity matrices across trained systems and audio
//! backbones, hierarchical (system-first / model-first) weighting, and
//! simplex grid search on validation mAP@16.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::evaluation::{evaluate, AnnotationMode, RelevanceMap};
use crate::math::{DenseMatrix, SimilarityMatrix};

/// Audio backbone slot of an ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AudioModel {
    Passt,
    Eat,
    Beats,
}

impl AudioModel {
    pub const ALL: [AudioModel; 3] = [AudioModel::Passt, AudioModel::Eat, AudioModel::Beats];

    pub fn name(self) -> &'static str {
        match self {
            AudioModel::Passt => "PaSST",
            AudioModel::Eat => "EAT",
            AudioModel::Beats => "BEATs",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

/// Which level is combined first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Combine systems within each model, then models.
    SystemFirst,
    /// Combine models within each system, then systems.
    ModelFirst,
}

/// System ids covered by the published coefficient table.
pub const SYSTEMS: [u8; 4] = [2, 3, 4, 5];

/// Published combination coefficients, columns ordered system-major
/// (2: PaSST, EAT, BEATs; 3: ...; 5: ...), rows E1..E4.
pub const PUBLISHED_COEFFICIENTS: [[f64; 12]; 4] = [
    [0.2275, 0.07, 0.06, 0.0, 0.12, 0.045, 0.325, 0.0, 0.045, 0.0975, 0.01, 0.0],
    [0.2275, 0.0875, 0.04, 0.0, 0.15, 0.03, 0.325, 0.0, 0.03, 0.0975, 0.0125, 0.0],
    [0.225, 0.175, 0.1, 0.03, 0.01, 0.01, 0.195, 0.045, 0.06, 0.09, 0.03, 0.03],
    [0.18, 0.14, 0.08, 0.09, 0.03, 0.03, 0.13, 0.03, 0.04, 0.15, 0.05, 0.05],
];

/// Strategy behind each published row: E1/E2 system-first, E3/E4 model-first.
pub const PUBLISHED_STRATEGIES: [Strategy; 4] =
    [Strategy::SystemFirst, Strategy::SystemFirst, Strategy::ModelFirst, Strategy::ModelFirst];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Member {
    pub system: u8,
    pub model: AudioModel,
    pub weight: f64,
}

/// Flattened convex weights over (system, model) members.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub members: Vec<Member>,
    pub strategy: Strategy,
}

fn check_convex(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        bail!(Contract, "ensemble weight {w} is negative or not finite");
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        bail!(Contract, "ensemble weights sum to {s}, expected 1");
    }
    Ok(())
}

impl EnsembleSpec {
    pub fn new(members: Vec<Member>, strategy: Strategy) -> Result<Self> {
        let spec = Self { members, strategy };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            bail!(Contract, "ensemble has no members");
        }
        check_convex(&self.weights())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }

    /// Members in table order (systems 2..5, each PaSST, EAT, BEATs).
    pub fn from_table_row(row: &[f64], strategy: Strategy) -> Result<Self> {
        if row.len() != SYSTEMS.len() * AudioModel::ALL.len() {
            bail!(Data, "coefficient row needs {} entries, got {}", SYSTEMS.len() * 3, row.len());
        }
        let members = SYSTEMS
            .iter()
            .flat_map(|&system| AudioModel::ALL.iter().map(move |&model| (system, model)))
            .zip(row)
            .map(|((system, model), &weight)| Member { system, model, weight })
            .collect();
        Self::new(members, strategy).map_err(|e| match e {
            crate::Error::Contract(m) => crate::Error::Data(m),
            other => other,
        })
    }
}

/// Elementwise `sum_i w_i M_i` with the spec's flattened weights.
pub fn fuse(matrices: &[SimilarityMatrix], spec: &EnsembleSpec) -> Result<SimilarityMatrix> {
    spec.validate()?;
    fuse_weights(matrices, &spec.weights())
}

/// Weighted sum without the convexity check (used inside searches).
pub fn fuse_weights(matrices: &[SimilarityMatrix], weights: &[f64]) -> Result<SimilarityMatrix> {
    let Some(first) = matrices.first() else { bail!(Contract, "no matrices to fuse") };
    if matrices.len() != weights.len() {
        bail!(Contract, "{} matrices for {} weights", matrices.len(), weights.len());
    }
    if matrices.iter().any(|m| m.shape() != first.shape()) {
        bail!(Contract, "similarity matrices differ in shape");
    }
    // the first weighted member seeds the sum, so a one-hot row returns its
    // member bit for bit (signed zeros included)
    let mut out: Option<DenseMatrix> = None;
    for (m, &w) in matrices.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        match out.as_mut() {
            None => {
                let mut seed = m.clone();
                seed.values_mut().iter_mut().for_each(|v| *v *= w);
                out = Some(seed);
            }
            Some(acc) => {
                for (o, v) in acc.values_mut().iter_mut().zip(m.values()) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(out.unwrap_or_else(|| DenseMatrix::zeros(first.rows(), first.cols())))
}

/// Loads the four coefficient rows (E1..E4) of a 4 x 12 table.
pub fn load_coefficients(table: &[[f64; 12]; 4]) -> Result<[EnsembleSpec; 4]> {
    let mut out = Vec::with_capacity(4);
    for (row, strategy) in table.iter().zip(PUBLISHED_STRATEGIES) {
        out.push(EnsembleSpec::from_table_row(row, strategy)?);
    }
    Ok(out.try_into().expect("four rows"))
}

/// Per-member flat weights (system-major) from two-stage weights.
///
/// System-first: `stage1[m]` weighs systems inside model group `m`, `stage2`
/// weighs the model groups. Model-first: `stage1[s]` weighs models inside
/// system group `s`, `stage2` weighs the systems.
pub fn flatten_hierarchical(
    strategy: Strategy,
    stage1: &[Vec<f64>],
    stage2: &[f64],
    systems: usize,
    models: usize,
) -> Result<Vec<f64>> {
    let (groups, within) = match strategy {
        Strategy::SystemFirst => (models, systems),
        Strategy::ModelFirst => (systems, models),
    };
    if stage1.len() != groups || stage2.len() != groups || stage1.iter().any(|g| g.len() != within) {
        bail!(Contract, "stage weights do not match {systems} systems x {models} models");
    }
    check_convex(stage2)?;
    for g in stage1 {
        check_convex(g)?;
    }
    let mut flat = vec![0.0; systems * models];
    for s in 0..systems {
        for m in 0..models {
            flat[s * models + m] = match strategy {
                Strategy::SystemFirst => stage2[m] * stage1[m][s],
                Strategy::ModelFirst => stage2[s] * stage1[s][m],
            };
        }
    }
    Ok(flat)
}

/// Two-stage fusion over `grid[system][model]`.
pub fn apply_strategy(
    grid: &[Vec<SimilarityMatrix>],
    strategy: Strategy,
    stage1: &[Vec<f64>],
    stage2: &[f64],
) -> Result<SimilarityMatrix> {
    let systems = grid.len();
    let models = grid.first().map_or(0, Vec::len);
    if systems == 0 || models == 0 || grid.iter().any(|r| r.len() != models) {
        bail!(Contract, "member grid must be a non-empty systems x models table");
    }
    flatten_hierarchical(strategy, stage1, stage2, systems, models)?;
    let groups: Vec<SimilarityMatrix> = match strategy {
        Strategy::SystemFirst => (0..models)
            .map(|m| {
                let col: Vec<SimilarityMatrix> = grid.iter().map(|row| row[m].clone()).collect();
                fuse_weights(&col, &stage1[m])
            })
            .collect::<Result<_>>()?,
        Strategy::ModelFirst => (0..systems).map(|s| fuse_weights(&grid[s], &stage1[s])).collect::<Result<_>>()?,
    };
    fuse_weights(&groups, stage2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSearchConfig {
    pub step: f64,
    /// Optional second pass on a finer grid within one coarse step of the
    /// coarse optimum.
    pub refine_step: Option<f64>,
    /// Largest number of simplex points a single search may visit.
    pub max_points: usize,
    /// Relevance regime of the validation objective.
    pub mode: AnnotationMode,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self { step: 0.01, refine_step: None, max_points: 200_000, mode: AnnotationMode::Multiple }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub weights: Vec<f64>,
    /// Validation mAP@16 of `fuse_weights(matrices, weights)`.
    pub objective: f64,
}

fn units_for(step: f64) -> Result<u32> {
    if !(step > 0.0) || step > 1.0 {
        bail!(Config, "grid step must lie in (0, 1], got {step}");
    }
    let units = libm::round(1.0 / step);
    if (units * step - 1.0).abs() > 1e-9 {
        bail!(Config, "grid step {step} does not divide 1");
    }
    Ok(units as u32)
}

/// Number of compositions of `units` into `parts` nonnegative parts.
fn simplex_points(units: u32, parts: usize) -> f64 {
    // C(units + parts - 1, parts - 1)
    let mut c = 1.0;
    for i in 1..parts {
        c = c * (units as f64 + i as f64) / i as f64;
    }
    c
}

/// Calls `f` on every composition of `total` into `parts` parts with each
/// part inside `[lo[i], hi[i]]`, in lexicographic order.
fn for_each_composition(total: u32, lo: &[u32], hi: &[u32], f: &mut dyn FnMut(&[u32]) -> Result<()>) -> Result<()> {
    fn rec(
        i: usize,
        left: u32,
        lo: &[u32],
        hi: &[u32],
        cur: &mut Vec<u32>,
        f: &mut dyn FnMut(&[u32]) -> Result<()>,
    ) -> Result<()> {
        if i + 1 == lo.len() {
            if left >= lo[i] && left <= hi[i] {
                cur.push(left);
                f(cur)?;
                cur.pop();
            }
            return Ok(());
        }
        let rest_min: u32 = lo[i + 1..].iter().sum();
        let rest_max: u32 = hi[i + 1..].iter().fold(0u32, |a, &b| a.saturating_add(b));
        for v in lo[i]..=hi[i].min(left) {
            let remaining = left - v;
            if remaining < rest_min || remaining > rest_max {
                continue;
            }
            cur.push(v);
            rec(i + 1, remaining, lo, hi, cur, f)?;
            cur.pop();
        }
        Ok(())
    }
    rec(0, total, lo, hi, &mut Vec::with_capacity(lo.len()), f)
}

fn objective(
    matrices: &[SimilarityMatrix],
    weights: &[f64],
    relevance: &RelevanceMap,
    mode: AnnotationMode,
) -> Result<f64> {
    Ok(evaluate(&fuse_weights(matrices, weights)?, relevance, mode)?.map_at_16)
}

/// Exhaustive search over the weight simplex at `cfg.step` maximizing
/// validation mAP@16. Among equal objectives the lexicographically smallest
/// weight vector wins.
pub fn grid_search(
    matrices: &[SimilarityMatrix],
    relevance: &RelevanceMap,
    cfg: &GridSearchConfig,
) -> Result<GridResult> {
    let m = matrices.len();
    if m < 2 {
        bail!(Contract, "grid search needs at least two members, got {m}");
    }
    let units = units_for(cfg.step)?;
    let points = simplex_points(units, m);
    if points > cfg.max_points as f64 {
        bail!(
            Config,
            "{m} members at step {} give {points:.0} grid points (budget {}); use a coarser step",
            cfg.step,
            cfg.max_points
        );
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let consider = |w: Vec<f64>, best: &mut Option<(f64, Vec<f64>)>| -> Result<()> {
        let obj = objective(matrices, &w, relevance, cfg.mode)?;
        let better = match best {
            None => true,
            Some((b, bw)) => obj > *b || (obj == *b && w.as_slice() < bw.as_slice()),
        };
        if better {
            *best = Some((obj, w));
        }
        Ok(())
    };
    let lo = vec![0u32; m];
    let hi = vec![units; m];
    for_each_composition(units, &lo, &hi, &mut |c| {
        consider(c.iter().map(|&u| u as f64 / units as f64).collect(), &mut best)
    })?;

    if let Some(fine) = cfg.refine_step {
        let fine_units = units_for(fine)?;
        if fine_units % units != 0 {
            bail!(Config, "refine step {fine} must subdivide the coarse step {}", cfg.step);
        }
        let ratio = fine_units / units;
        let center: Vec<u32> =
            best.as_ref().unwrap().1.iter().map(|w| libm::round(w * fine_units as f64) as u32).collect();
        let lo: Vec<u32> = center.iter().map(|&c| c.saturating_sub(ratio)).collect();
        let hi: Vec<u32> = center.iter().map(|&c| (c + ratio).min(fine_units)).collect();
        let window: f64 = lo.iter().zip(&hi).map(|(l, h)| (h - l + 1) as f64).product();
        if window > cfg.max_points as f64 {
            bail!(Config, "refinement window of {window:.0} points exceeds the budget {}", cfg.max_points);
        }
        for_each_composition(fine_units, &lo, &hi, &mut |c| {
            consider(c.iter().map(|&u| u as f64 / fine_units as f64).collect(), &mut best)
        })?;
    }
    let (objective, weights) = best.expect("at least one grid point");
    Ok(GridResult { weights, objective })
}

/// Factored search mirroring the two ensembling strategies: first the
/// within-group weights of every group, then the weights across the fused
/// groups. The reported objective is recomputed on the flat fusion.
pub fn hierarchical_grid_search(
    grid: &[Vec<SimilarityMatrix>],
    systems: &[u8],
    relevance: &RelevanceMap,
    strategy: Strategy,
    cfg: &GridSearchConfig,
) -> Result<(EnsembleSpec, f64)> {
    let n_sys = grid.len();
    let n_mod = grid.first().map_or(0, Vec::len);
    if n_sys == 0 || n_mod == 0 || grid.iter().any(|r| r.len() != n_mod) || systems.len() != n_sys || n_mod > 3 {
        bail!(Contract, "member grid must be systems x models with at most three model slots");
    }
    let groups: Vec<Vec<SimilarityMatrix>> = match strategy {
        Strategy::SystemFirst => (0..n_mod).map(|m| grid.iter().map(|r| r[m].clone()).collect()).collect(),
        Strategy::ModelFirst => grid.to_vec(),
    };
    let mut stage1 = Vec::with_capacity(groups.len());
    let mut fused = Vec::with_capacity(groups.len());
    for g in &groups {
        let w = if g.len() == 1 { vec![1.0] } else { grid_search(g, relevance, cfg)?.weights };
        fused.push(fuse_weights(g, &w)?);
        stage1.push(w);
    }
    let stage2 = if fused.len() == 1 { vec![1.0] } else { grid_search(&fused, relevance, cfg)?.weights };
    let flat = flatten_hierarchical(strategy, &stage1, &stage2, n_sys, n_mod)?;
    let flat_matrices: Vec<SimilarityMatrix> = grid.iter().flatten().cloned().collect();
    let obj = objective(&flat_matrices, &flat, relevance, cfg.mode)?;
    let members = systems
        .iter()
        .flat_map(|&system| AudioModel::ALL[..n_mod].iter().map(move |&model| (system, model)))
        .zip(&flat)
        .map(|((system, model), &weight)| Member { system, model, weight })
        .collect();
    Ok((EnsembleSpec { members, strategy }, obj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(v: f64) -> DenseMatrix {
        DenseMatrix::from_rows(&[vec![v]]).unwrap()
    }

    fn spec(ws: &[f64]) -> EnsembleSpec {
        EnsembleSpec::new(
            ws.iter()
                .enumerate()
                .map(|(i, &w)| Member { system: 2 + i as u8, model: AudioModel::Passt, weight: w })
                .collect(),
            Strategy::SystemFirst,
        )
        .unwrap()
    }

    #[test]
    fn fuse_examples() {
        let a = DenseMatrix::from_rows(&[vec![0.3, -0.2], vec![0.9, 0.1]]).unwrap();
        assert_eq!(fuse(core::slice::from_ref(&a), &spec(&[1.0])).unwrap(), a);
        let two = fuse(&[a.clone(), a.clone()], &spec(&[0.25, 0.75])).unwrap();
        for (x, y) in two.values().iter().zip(a.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        assert_eq!(fuse(&[m(1.0), m(0.0)], &spec(&[0.5, 0.5])).unwrap(), m(0.5));
        assert!(fuse(&[m(1.0)], &spec(&[0.5, 0.5])).is_err());
        assert!(EnsembleSpec::new(
            vec![Member { system: 2, model: AudioModel::Eat, weight: 0.9 }],
            Strategy::ModelFirst
        )
        .is_err());
    }

    #[test]
    fn published_rows_load() {
        let specs = load_coefficients(&PUBLISHED_COEFFICIENTS).unwrap();
        for s in &specs {
            assert_abs_diff_eq!(s.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        let e4 = &specs[3];
        let passt5 = e4.members.iter().find(|m| m.system == 5 && m.model == AudioModel::Passt).unwrap();
        assert_eq!(passt5.weight, 0.15);
        assert_eq!(specs[0].strategy, Strategy::SystemFirst);
        assert_eq!(specs[2].strategy, Strategy::ModelFirst);
        let mut bad = PUBLISHED_COEFFICIENTS;
        bad[1][0] = -0.1;
        bad[1][1] += 0.1 + 0.2275;
        assert!(matches!(load_coefficients(&bad), Err(crate::Error::Data(_))));
    }

    #[test]
    fn hierarchical_products() {
        let flat =
            flatten_hierarchical(Strategy::ModelFirst, &[vec![0.4, 0.6], vec![1.0, 0.0]], &[0.5, 0.5], 2, 2).unwrap();
        assert_eq!(flat, vec![0.2, 0.3, 0.5, 0.0]);
        let one = apply_strategy(&[vec![m(0.7)]], Strategy::SystemFirst, &[vec![1.0]], &[1.0]).unwrap();
        assert_eq!(one, m(0.7));
    }

    #[test]
    fn strategies_agree_with_flat_fusion() {
        let grid: Vec<Vec<DenseMatrix>> = (0..2)
            .map(|s| {
                (0..3)
                    .map(|k| DenseMatrix::from_fn(3, 3, |i, j| ((s * 7 + k * 3 + i * 2 + j) % 5) as f64 / 5.0))
                    .collect()
            })
            .collect();
        // same flat weights through both orderings: w[s][m] = a_s * b_m
        let a = [0.25, 0.75];
        let b = [0.2, 0.3, 0.5];
        let sys_first =
            apply_strategy(&grid, Strategy::SystemFirst, &[a.to_vec(), a.to_vec(), a.to_vec()], &b).unwrap();
        let mod_first = apply_strategy(&grid, Strategy::ModelFirst, &[b.to_vec(), b.to_vec()], &a).unwrap();
        let flat: Vec<f64> = (0..2).flat_map(|s| (0..3).map(move |k| a[s] * b[k])).collect();
        let direct = fuse_weights(&grid.concat(), &flat).unwrap();
        for ((x, y), z) in sys_first.values().iter().zip(mod_first.values()).zip(direct.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            assert_abs_diff_eq!(x, z, epsilon = 1e-12);
        }
        assert!(apply_strategy(&grid, Strategy::ModelFirst, &[b.to_vec()], &a).is_err());
    }

    fn one_hot_pair(correct: bool, n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, n, |i, j| if (i == j) == correct { 1.0 } else { 0.0 })
    }

    #[test]
    fn dominant_member_takes_all_weight() {
        let rel = RelevanceMap::single((0..20).collect(), 20).unwrap();
        let good = DenseMatrix::identity(20);
        let bad = one_hot_pair(false, 20);
        let cfg = GridSearchConfig { step: 0.1, ..Default::default() };
        let r = grid_search(&[bad.clone(), good.clone(), bad], &rel, &cfg).unwrap();
        assert_eq!(r.objective, 1.0);
        // any weight above the others' sum ranks correctly; the tie rule picks
        // the lexicographically smallest of those
        assert_eq!(r.weights[0], 0.0);
        assert!(r.weights[1] > 0.5);
    }

    #[test]
    fn identical_members_tie_to_smallest_vector() {
        let rel = RelevanceMap::single((0..5).collect(), 5).unwrap();
        let a = DenseMatrix::from_fn(5, 5, |i, j| ((i * 3 + j * 7) % 11) as f64 / 11.0);
        let r = grid_search(&[a.clone(), a], &rel, &GridSearchConfig::default()).unwrap();
        assert_eq!(r.weights, vec![0.0, 1.0]);
    }

    #[test]
    fn budget_and_step_checks() {
        let rel = RelevanceMap::single(vec![0], 1).unwrap();
        let ms = vec![m(0.0); 12];
        assert!(matches!(grid_search(&ms, &rel, &GridSearchConfig::default()), Err(crate::Error::Config(_))));
        let cfg = GridSearchConfig { step: 0.3, ..Default::default() };
        assert!(matches!(grid_search(&ms[..2], &rel, &cfg), Err(crate::Error::Config(_))));
        assert!(matches!(grid_search(&ms[..1], &rel, &GridSearchConfig::default()), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn compositions_are_lexicographic_and_complete() {
        let mut seen = Vec::new();
        for_each_composition(3, &[0, 0, 0], &[3, 3, 3], &mut |c| {
            seen.push(c.to_vec());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 10);
        assert_eq!(simplex_points(3, 3), 10.0);
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
    }
}
