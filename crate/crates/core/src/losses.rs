//! Contrastive, distillation and auxiliary classification losses, their
//! weighted combination, and analytic gradients through the dual encoders.
//!
//! Conventions shared by every term:
//! - the batch pairs audio row `i` with caption row `i` (positives on the
//!   diagonal of the similarity matrix);
//! - each cross-entropy term is the mean over the batch's distributions;
//! - teacher targets are constants, no gradient flows into them.

use alloc::vec::Vec;

use crate::encoders::{encode, head_forward, ClassificationHead, ModelParams, ParamGradients};
use crate::error::{bail, Error, Result};
use crate::math::{
    cross_entropy_from_log, dot, l2_norm, log_softmax_with_temperature, softmax_with_temperature, Axis, DenseMatrix,
    FeatureBatch, ProbabilityMatrix, SimilarityMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the distillation term.
    pub lambda1: f64,
    /// Weight of the two classification terms.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.05, lambda1: 1.0, lambda2: 0.05 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            bail!(Config, "tau must be positive, got {}", self.tau);
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            bail!(Config, "loss weights must be nonnegative");
        }
        Ok(())
    }
}

/// Per-term loss values and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_dist: f64,
    pub l_cls_audio: f64,
    pub l_cls_text: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_sup, self.l_dist, self.l_cls_audio, self.l_cls_text, self.total].iter().all(|v| v.is_finite())
    }
}

/// Soft correspondence targets derived from an averaged teacher similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    /// Distributions over audios, one per caption (columns).
    pub p_hat_audio: ProbabilityMatrix,
    /// Distributions over captions, one per audio (rows).
    pub p_hat_text: ProbabilityMatrix,
    /// Number of teachers averaged.
    pub m: usize,
}

fn require_square(sim: &DenseMatrix) -> Result<usize> {
    if sim.rows() != sim.cols() {
        bail!(Contract, "similarity matrix must be square, got {}x{}", sim.rows(), sim.cols());
    }
    Ok(sim.rows())
}

/// `H(p_a, q_a) + H(p_c, q_c)` with one-hot diagonal targets.
pub fn supervised_contrastive_loss(sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<f64> {
    let n = require_square(sim)?;
    let log_qa = log_softmax_with_temperature(sim, cfg.tau, Axis::OverAudios)?;
    let log_qc = log_softmax_with_temperature(sim, cfg.tau, Axis::OverCaptions)?;
    let pa = ProbabilityMatrix::one_hot_diagonal(n, Axis::OverAudios);
    let pc = ProbabilityMatrix::one_hot_diagonal(n, Axis::OverCaptions);
    Ok(cross_entropy_from_log(&pa, &log_qa) + cross_entropy_from_log(&pc, &log_qc))
}

/// Elementwise mean of the teachers' similarity matrices.
///
/// Each cell's values are summed in sorted order, so the result does not
/// depend on the order the teachers are listed in.
pub fn ensemble_average(similarities: &[SimilarityMatrix]) -> Result<SimilarityMatrix> {
    let first = similarities.first().ok_or_else(|| Error::Contract("no teacher similarities".into()))?;
    if similarities.iter().any(|s| s.shape() != first.shape()) {
        bail!(Contract, "teacher similarity shapes differ");
    }
    if similarities.len() == 1 {
        return Ok(first.clone());
    }
    let m = similarities.len() as f64;
    let mut cell = Vec::with_capacity(similarities.len());
    let mut out = DenseMatrix::zeros(first.rows(), first.cols());
    for (idx, v) in out.values_mut().iter_mut().enumerate() {
        cell.clear();
        cell.extend(similarities.iter().map(|s| s.values()[idx]));
        cell.sort_by(f64::total_cmp);
        *v = if cell[0] == cell[cell.len() - 1] { cell[0] } else { cell.iter().sum::<f64>() / m };
    }
    Ok(out)
}

/// Softmax of the averaged teacher similarity over audios and over captions.
pub fn teacher_soft_targets(avg_sim: &SimilarityMatrix, m: usize, cfg: &LossConfig) -> Result<TeacherTargets> {
    if m == 0 {
        bail!(Contract, "teacher count must be at least 1");
    }
    Ok(TeacherTargets {
        p_hat_audio: softmax_with_temperature(avg_sim, cfg.tau, Axis::OverAudios)?,
        p_hat_text: softmax_with_temperature(avg_sim, cfg.tau, Axis::OverCaptions)?,
        m,
    })
}

fn check_targets(targets: &TeacherTargets, sim: &DenseMatrix) -> Result<()> {
    if targets.p_hat_audio.matrix().shape() != sim.shape()
        || targets.p_hat_text.matrix().shape() != sim.shape()
        || targets.p_hat_audio.axis() != Axis::OverAudios
        || targets.p_hat_text.axis() != Axis::OverCaptions
    {
        bail!(Contract, "teacher targets do not match the {}x{} student batch", sim.rows(), sim.cols());
    }
    Ok(())
}

/// `H(p_hat_a, q_a) + H(p_hat_c, q_c)` with `q` from the student similarity.
pub fn distillation_loss(targets: &TeacherTargets, sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<f64> {
    check_targets(targets, sim)?;
    let log_qa = log_softmax_with_temperature(sim, cfg.tau, Axis::OverAudios)?;
    let log_qc = log_softmax_with_temperature(sim, cfg.tau, Axis::OverCaptions)?;
    Ok(cross_entropy_from_log(&targets.p_hat_audio, &log_qa) + cross_entropy_from_log(&targets.p_hat_text, &log_qc))
}

/// Mean softmax cross-entropy of cluster logits against hard labels.
pub fn classification_loss(logits: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    classification_loss_and_grad(logits, labels).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub(crate) fn classification_loss_and_grad(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    if labels.len() != logits.rows() {
        bail!(Contract, "{} labels for {} logit rows", labels.len(), logits.rows());
    }
    let k = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        bail!(Data, "cluster label {bad} outside [0, {k})");
    }
    let n = logits.rows();
    if n == 0 {
        return Ok((0.0, DenseMatrix::zeros(0, k)));
    }
    let log_p = log_softmax_with_temperature(logits, 1.0, Axis::OverCaptions)?;
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(n, k);
    for (i, &label) in labels.iter().enumerate() {
        loss -= log_p.get(i, label);
        for c in 0..k {
            let target = if c == label { 1.0 } else { 0.0 };
            grad.set(i, c, (libm::exp(log_p.get(i, c)) - target) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// `total = l_sup + lambda1 l_dist + lambda2 (l_cls_audio + l_cls_text)`.
pub fn combined_loss(
    l_sup: f64,
    l_dist: f64,
    l_cls_audio: f64,
    l_cls_text: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let parts = [l_sup, l_dist, l_cls_audio, l_cls_text];
    if parts.iter().any(|v| !(*v >= 0.0)) {
        bail!(Contract, "loss components must be nonnegative, got {parts:?}");
    }
    Ok(LossBreakdown {
        l_sup,
        l_dist,
        l_cls_audio,
        l_cls_text,
        total: l_sup + cfg.lambda1 * l_dist + cfg.lambda2 * (l_cls_audio + l_cls_text),
    })
}

/// Paired audio/caption features; row `i` of each side forms a positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub audio: FeatureBatch,
    pub text: FeatureBatch,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }
}

/// Cluster labels for the batch rows (audio labels come from paired captions).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    pub audio: Vec<usize>,
    pub text: Vec<usize>,
}

/// Similarity matrix of a model on a batch (forward pass only).
pub fn batch_similarity(params: &ModelParams, batch: &TrainBatch) -> Result<SimilarityMatrix> {
    let a = encode(&params.audio_encoder, &batch.audio)?;
    let t = encode(&params.text_encoder, &batch.text)?;
    crate::math::cosine_similarity_matrix(&a, &t)
}

struct Normalized {
    unit: DenseMatrix,
    norms: Vec<f64>,
}

fn normalize(emb: &DenseMatrix, ids: &[usize]) -> Result<Normalized> {
    let mut unit = emb.clone();
    let mut norms = Vec::with_capacity(emb.rows());
    for (i, id) in ids.iter().enumerate().take(emb.rows()) {
        let n = l2_norm(emb.row(i));
        if !(n > 0.0) {
            bail!(Domain, "embedding of item {id} has zero norm");
        }
        unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(Normalized { unit, norms })
}

/// Backprop through `u = e / |e|`: `de = (du - u <u, du>) / |e|`.
fn unnormalize_grad(n: &Normalized, d_unit: &DenseMatrix) -> DenseMatrix {
    let mut out = d_unit.clone();
    for i in 0..out.rows() {
        let u = n.unit.row(i);
        let proj = dot(u, d_unit.row(i));
        let norm = n.norms[i];
        for (o, &ui) in out.row_mut(i).iter_mut().zip(u) {
            *o = (*o - ui * proj) / norm;
        }
    }
    out
}

/// Adds `sum_i d_out[i] x[i]^T` into `w_grad` and `sum_i d_out[i]` into `b_grad`.
fn accumulate_affine(d_out: &DenseMatrix, x: &DenseMatrix, w_grad: &mut DenseMatrix, b_grad: &mut [f64]) {
    for i in 0..d_out.rows() {
        let g = d_out.row(i);
        let xi = x.row(i);
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            b_grad[o] += go;
            for (w, &xv) in w_grad.row_mut(o).iter_mut().zip(xi) {
                *w += go * xv;
            }
        }
    }
}

/// Classification term for one head: loss, head gradients and the gradient
/// with respect to the embedding rows it consumed.
fn head_backward(
    head: &ClassificationHead,
    emb: &DenseMatrix,
    labels: &[usize],
    weight: f64,
    grads: &mut ClassificationHead,
) -> Result<(f64, DenseMatrix)> {
    let fwd = head_forward(head, emb)?;
    let (loss, mut d_logits) = classification_loss_and_grad(&fwd.logits, labels)?;
    d_logits.values_mut().iter_mut().for_each(|v| *v *= weight);
    let hidden = DenseMatrix::from_fn(fwd.pre.rows(), fwd.pre.cols(), |i, h| fwd.pre.get(i, h).max(0.0));
    accumulate_affine(&d_logits, &hidden, &mut grads.w2, &mut grads.b2);
    let d_pre = DenseMatrix::from_fn(fwd.pre.rows(), fwd.pre.cols(), |i, h| {
        if fwd.pre.get(i, h) > 0.0 {
            (0..head.clusters()).map(|k| head.w2.get(k, h) * d_logits.get(i, k)).sum()
        } else {
            0.0
        }
    });
    accumulate_affine(&d_pre, emb, &mut grads.w1, &mut grads.b1);
    let d_emb = DenseMatrix::from_fn(emb.rows(), emb.cols(), |i, e| {
        (0..head.hidden()).map(|h| head.w1.get(h, e) * d_pre.get(i, h)).sum()
    });
    Ok((loss, d_emb))
}

/// Full objective on one batch and its exact gradient for every parameter.
///
/// `targets` is required when `lambda1 > 0` and `labels` when `lambda2 > 0`.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &TrainBatch,
    targets: Option<&TeacherTargets>,
    labels: Option<&BatchLabels>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ParamGradients)> {
    cfg.validate()?;
    if cfg.lambda1 > 0.0 && targets.is_none() {
        bail!(Config, "distillation weight is {} but no teacher targets were given", cfg.lambda1);
    }
    if cfg.lambda2 > 0.0 && labels.is_none() {
        bail!(Config, "classification weight is {} but no cluster labels were given", cfg.lambda2);
    }
    if labels.is_some() && (params.audio_head.is_none() || params.text_head.is_none()) {
        bail!(Config, "cluster labels given but the model has no classification heads");
    }
    if batch.audio.len() != batch.text.len() {
        bail!(Contract, "batch has {} audio rows but {} caption rows", batch.audio.len(), batch.text.len());
    }
    let n = batch.len();
    if n == 0 {
        bail!(Contract, "empty batch");
    }

    let emb_a = encode(&params.audio_encoder, &batch.audio)?;
    let emb_t = encode(&params.text_encoder, &batch.text)?;
    let na = normalize(&emb_a.values, &emb_a.ids)?;
    let nt = normalize(&emb_t.values, &emb_t.ids)?;
    let sim = DenseMatrix::from_fn(n, n, |i, j| dot(na.unit.row(i), nt.unit.row(j)));

    let tau = cfg.tau;
    let log_qa = log_softmax_with_temperature(&sim, tau, Axis::OverAudios)?;
    let log_qc = log_softmax_with_temperature(&sim, tau, Axis::OverCaptions)?;
    let pa = ProbabilityMatrix::one_hot_diagonal(n, Axis::OverAudios);
    let pc = ProbabilityMatrix::one_hot_diagonal(n, Axis::OverCaptions);
    let l_sup = cross_entropy_from_log(&pa, &log_qa) + cross_entropy_from_log(&pc, &log_qc);

    // dL/dC for a softmax-CE term along one axis is (q - p) / (tau * #distributions).
    let scale = 1.0 / (tau * n as f64);
    let mut g_sim = DenseMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { 1.0 } else { 0.0 };
        (libm::exp(log_qa.get(i, j)) - diag + libm::exp(log_qc.get(i, j)) - diag) * scale
    });

    let mut l_dist = 0.0;
    if let Some(t) = targets {
        check_targets(t, &sim)?;
        l_dist = cross_entropy_from_log(&t.p_hat_audio, &log_qa) + cross_entropy_from_log(&t.p_hat_text, &log_qc);
        let w = cfg.lambda1 * scale;
        if w != 0.0 {
            for i in 0..n {
                for j in 0..n {
                    let d = libm::exp(log_qa.get(i, j)) - t.p_hat_audio.matrix().get(i, j)
                        + libm::exp(log_qc.get(i, j))
                        - t.p_hat_text.matrix().get(i, j);
                    let v = g_sim.get(i, j) + w * d;
                    g_sim.set(i, j, v);
                }
            }
        }
    }

    // C = A_hat T_hat^T
    let d_unit_a =
        DenseMatrix::from_fn(n, na.unit.cols(), |i, e| (0..n).map(|j| g_sim.get(i, j) * nt.unit.get(j, e)).sum());
    let d_unit_t =
        DenseMatrix::from_fn(n, nt.unit.cols(), |j, e| (0..n).map(|i| g_sim.get(i, j) * na.unit.get(i, e)).sum());
    let mut d_emb_a = unnormalize_grad(&na, &d_unit_a);
    let mut d_emb_t = unnormalize_grad(&nt, &d_unit_t);

    let mut grads = params.zeros_like();
    let (mut l_cls_audio, mut l_cls_text) = (0.0, 0.0);
    if let Some(lab) = labels {
        if lab.audio.len() != n || lab.text.len() != n {
            bail!(Contract, "cluster labels do not cover the batch");
        }
        let (ha, ht) = (params.audio_head.as_ref().unwrap(), params.text_head.as_ref().unwrap());
        let (ga, gt) = (grads.audio_head.as_mut().unwrap(), grads.text_head.as_mut().unwrap());
        let (la, de_a) = head_backward(ha, &emb_a.values, &lab.audio, cfg.lambda2, ga)?;
        let (lt, de_t) = head_backward(ht, &emb_t.values, &lab.text, cfg.lambda2, gt)?;
        l_cls_audio = la;
        l_cls_text = lt;
        for (d, e) in d_emb_a.values_mut().iter_mut().zip(de_a.values()) {
            *d += e;
        }
        for (d, e) in d_emb_t.values_mut().iter_mut().zip(de_t.values()) {
            *d += e;
        }
    }

    accumulate_affine(&d_emb_a, &batch.audio.values, &mut grads.audio_encoder.weight, &mut grads.audio_encoder.bias);
    accumulate_affine(&d_emb_t, &batch.text.values, &mut grads.text_encoder.weight, &mut grads.text_encoder.bias);

    let breakdown = combined_loss(l_sup, l_dist, l_cls_audio, l_cls_text, cfg)?;
    Ok((breakdown, grads))
}

/// Sum of the target entropies in both directions (mean over distributions),
/// the lower bound of the distillation loss.
pub fn target_entropy(targets: &TeacherTargets) -> f64 {
    let h = |p: &ProbabilityMatrix| {
        let n = p.distribution_count();
        let mut s = 0.0;
        for d in 0..n {
            for k in 0..p.distribution_len() {
                let v = p.at(d, k);
                if v > 0.0 {
                    s -= v * libm::log(v);
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    h(&targets.p_hat_audio) + h(&targets.p_hat_text)
}

/// Labels `[0..k)` for a batch view of per-item label arrays.
pub fn gather_labels(audio_labels: &[usize], text_labels: &[usize], rows: &[usize]) -> BatchLabels {
    BatchLabels {
        audio: rows.iter().map(|&r| audio_labels[r]).collect(),
        text: rows.iter().map(|&r| text_labels[r]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::init_params;
    use crate::math::RowBatch;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(r).unwrap()
    }

    #[test]
    fn supervised_closed_forms() {
        let cfg = LossConfig::default();
        let l = supervised_contrastive_loss(&DenseMatrix::identity(2), &cfg).unwrap();
        assert!(l <= 1e-8);
        assert_abs_diff_eq!(l, 4.122307240628761e-9, epsilon = 1e-15);

        let flat = DenseMatrix::from_fn(4, 4, |_, _| 0.3);
        assert_abs_diff_eq!(supervised_contrastive_loss(&flat, &cfg).unwrap(), 2.772588722239781, epsilon = 1e-9);

        let swapped = rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_abs_diff_eq!(supervised_contrastive_loss(&swapped, &cfg).unwrap(), 40.0, epsilon = 1e-6);

        assert!(matches!(supervised_contrastive_loss(&DenseMatrix::zeros(2, 3), &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn ensemble_average_examples() {
        let a = rows(&[vec![0.3, 0.1]]);
        assert_eq!(ensemble_average(core::slice::from_ref(&a)).unwrap(), a);
        let b = rows(&[vec![0.6, 0.1]]);
        let c = rows(&[vec![0.9, 0.1]]);
        let avg = ensemble_average(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_abs_diff_eq!(avg.get(0, 0), 0.6, epsilon = 1e-15);
        assert_eq!(avg, ensemble_average(&[c.clone(), a.clone(), b]).unwrap());
        assert_eq!(ensemble_average(&[c.clone(), c.clone(), c.clone()]).unwrap(), c);
        assert!(matches!(ensemble_average(&[]), Err(Error::Contract(_))));
        assert!(matches!(ensemble_average(&[a, DenseMatrix::zeros(2, 2)]), Err(Error::Contract(_))));
    }

    #[test]
    fn soft_target_examples() {
        let cfg = LossConfig::default();
        let t = teacher_soft_targets(&DenseMatrix::identity(2), 1, &cfg).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(t.p_hat_audio.matrix().get(i, j), want, epsilon = 1e-8);
                assert_abs_diff_eq!(t.p_hat_text.matrix().get(i, j), want, epsilon = 1e-8);
            }
        }
        let t = teacher_soft_targets(&DenseMatrix::from_fn(3, 3, |_, _| 0.2), 1, &cfg).unwrap();
        assert!(t.p_hat_text.matrix().values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let t =
            teacher_soft_targets(&rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]), 1, &LossConfig { tau: 1.0, ..cfg }).unwrap();
        assert_abs_diff_eq!(t.p_hat_text.at(0, 0), 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(t.p_hat_text.at(0, 1), 0.2689, epsilon = 1e-4);
    }

    #[test]
    fn distillation_examples() {
        let cfg = LossConfig::default();
        let sim = rows(&[vec![0.2, -0.1, 0.4], vec![0.0, 0.3, 0.1], vec![-0.2, 0.5, 0.6]]);
        let t = teacher_soft_targets(&sim, 1, &cfg).unwrap();
        assert_abs_diff_eq!(distillation_loss(&t, &sim, &cfg).unwrap(), target_entropy(&t), epsilon = 1e-12);

        let uniform = teacher_soft_targets(&DenseMatrix::zeros(2, 2), 1, &cfg).unwrap();
        let student = DenseMatrix::from_fn(2, 2, |_, _| 0.7);
        assert_abs_diff_eq!(
            distillation_loss(&uniform, &student, &cfg).unwrap(),
            2.0 * core::f64::consts::LN_2,
            epsilon = 1e-12
        );

        let hard = TeacherTargets {
            p_hat_audio: ProbabilityMatrix::one_hot_diagonal(2, Axis::OverAudios),
            p_hat_text: ProbabilityMatrix::one_hot_diagonal(2, Axis::OverCaptions),
            m: 1,
        };
        assert!(distillation_loss(&hard, &DenseMatrix::identity(2), &cfg).unwrap() <= 1e-8);
        assert!(matches!(distillation_loss(&hard, &DenseMatrix::identity(3), &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn classification_examples() {
        let l = classification_loss(&DenseMatrix::zeros(1, 3), &[2]).unwrap();
        assert_abs_diff_eq!(l, 1.0986122886681098, epsilon = 1e-12);
        let l = classification_loss(&rows(&[vec![40.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(l <= 1e-8);
        // row 0: uniform over 2 -> ln 2; row 1: saturated -> ~0
        let l = classification_loss(&rows(&[vec![0.0, 0.0], vec![0.0, 800.0]]), &[0, 1]).unwrap();
        assert_abs_diff_eq!(l, core::f64::consts::LN_2 / 2.0, epsilon = 1e-12);
        assert!(matches!(classification_loss(&DenseMatrix::zeros(1, 3), &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn combined_examples() {
        let cfg = LossConfig::default();
        let b = combined_loss(1.0, 0.5, 0.2, 0.4, &cfg).unwrap();
        assert_abs_diff_eq!(b.total, 1.53, epsilon = 1e-12);
        let b = combined_loss(1.0, 0.5, 0.2, 0.4, &LossConfig { lambda2: 0.0, ..cfg }).unwrap();
        assert_eq!(b.total, 1.0 + 1.0 * 0.5);
        assert_eq!(combined_loss(0.0, 0.0, 0.0, 0.0, &cfg).unwrap().total, 0.0);
        assert!(matches!(combined_loss(-1.0, 0.0, 0.0, 0.0, &cfg), Err(Error::Contract(_))));
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, da: usize, dt: usize) -> TrainBatch {
        let a = DenseMatrix::from_fn(n, da, |_, _| rng.gen_range(-1.0..1.0));
        let t = DenseMatrix::from_fn(n, dt, |_, _| rng.gen_range(-1.0..1.0));
        TrainBatch { audio: RowBatch::indexed(a), text: RowBatch::indexed(t) }
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_params(3, 3, 2, None, 0).unwrap();
        let b = random_batch(&mut rng, 3, 3, 3);
        let cfg = LossConfig::default();
        assert!(matches!(loss_and_gradients(&p, &b, None, None, &cfg), Err(Error::Config(_))));
        let cfg = LossConfig { lambda1: 0.0, ..cfg };
        assert!(matches!(loss_and_gradients(&p, &b, None, None, &cfg), Err(Error::Config(_))));
        let cfg = LossConfig { lambda2: 0.0, ..cfg };
        assert!(loss_and_gradients(&p, &b, None, None, &cfg).is_ok());
    }

    #[test]
    fn inactive_paths_leave_supervised_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = init_params(5, 4, 3, None, 1).unwrap();
        let b = random_batch(&mut rng, 4, 5, 4);
        let sup = LossConfig { lambda1: 0.0, lambda2: 0.0, ..LossConfig::default() };
        let (l0, g0) = loss_and_gradients(&p, &b, None, None, &sup).unwrap();
        let sim = batch_similarity(&p, &b).unwrap();
        let t = teacher_soft_targets(&sim, 1, &sup).unwrap();
        let (l1, g1) = loss_and_gradients(&p, &b, Some(&t), None, &sup).unwrap();
        assert_eq!(g0, g1);
        assert_eq!(l0.total, l1.total);
        assert_abs_diff_eq!(l0.l_sup, supervised_contrastive_loss(&sim, &sup).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn classification_gradient_is_batch_duplication_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_params(3, 3, 4, Some(3), 2).unwrap();
        let emb = DenseMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let labels = [0, 2, 1, 2];
        let head = p.text_head.as_ref().unwrap();
        let mut g1 = head.clone();
        let mut g2 = head.clone();
        for g in [&mut g1, &mut g2] {
            g.w1.values_mut().fill(0.0);
            g.b1.fill(0.0);
            g.w2.values_mut().fill(0.0);
            g.b2.fill(0.0);
        }
        let (l1, d1) = head_backward(head, &emb, &labels, 1.0, &mut g1).unwrap();
        let doubled = emb.select_rows(&[0, 1, 2, 3, 0, 1, 2, 3]);
        let (l2, d2) = head_backward(head, &doubled, &[0, 2, 1, 2, 0, 2, 1, 2], 1.0, &mut g2).unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
        for (a, b) in g1.w1.values().iter().zip(g2.w1.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in g1.w2.values().iter().zip(g2.w2.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // per-row embedding gradients halve because each row now carries weight 1/(2N)
        assert_abs_diff_eq!(d1.get(1, 2), 2.0 * d2.get(1, 2), epsilon = 1e-12);
    }
}
