//! Stage driver: pretraining, distillation finetuning and cluster-guided
//! re-finetuning all run through [`run_stage`] with different switches.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_caption, mix_pairs, AugmentationConfig, TrainingPair, WordVectors};
use super::batching::make_batches;
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::schedule::{lr_at_step, ScheduleConfig};
use crate::encoders::{encode, ModelParams};
use crate::error::{bail, Result};
use crate::losses::{
    batch_similarity, ensemble_average, loss_and_gradients, teacher_soft_targets, BatchLabels, LossBreakdown,
    LossConfig, TrainBatch,
};
use crate::math::{cosine_similarity_matrix, DenseMatrix, RowBatch};

/// Audio items, captions and the caption -> audio pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    /// One row per audio item.
    pub audio: DenseMatrix,
    /// One row per caption.
    pub text: DenseMatrix,
    /// Audio row paired with each caption.
    pub caption_audio: Vec<usize>,
    /// Caption words, when available; needed for word-level augmentation.
    pub tokens: Option<Vec<Vec<String>>>,
}

impl PairDataset {
    pub fn new(
        audio: DenseMatrix,
        text: DenseMatrix,
        caption_audio: Vec<usize>,
        tokens: Option<Vec<Vec<String>>>,
    ) -> Result<Self> {
        if caption_audio.len() != text.rows() {
            bail!(Contract, "{} pairings for {} captions", caption_audio.len(), text.rows());
        }
        if let Some(&bad) = caption_audio.iter().find(|&&a| a >= audio.rows()) {
            bail!(Data, "caption paired with audio row {bad}, only {} audio items", audio.rows());
        }
        if let Some(t) = &tokens {
            if t.len() != text.rows() {
                bail!(Contract, "{} token lists for {} captions", t.len(), text.rows());
            }
        }
        Ok(Self { audio, text, caption_audio, tokens })
    }

    pub fn captions(&self) -> usize {
        self.text.rows()
    }

    pub fn audios(&self) -> usize {
        self.audio.rows()
    }

    /// Keeps the listed captions and the audio items they pair with. Audio
    /// rows keep their relative order.
    pub fn subset(&self, captions: &[usize]) -> Result<Self> {
        if let Some(&bad) = captions.iter().find(|&&c| c >= self.captions()) {
            bail!(Contract, "caption {bad} out of range");
        }
        let mut used: Vec<usize> = captions.iter().map(|&c| self.caption_audio[c]).collect();
        used.sort_unstable();
        used.dedup();
        let remap = |a: usize| used.binary_search(&a).expect("audio row kept");
        Self::new(
            self.audio.select_rows(&used),
            self.text.select_rows(captions),
            captions.iter().map(|&c| remap(self.caption_audio[c])).collect(),
            self.tokens.as_ref().map(|t| captions.iter().map(|&c| t[c].clone()).collect()),
        )
    }

    /// Features of caption `c` and its audio item, as one batch of size 1..n.
    pub fn batch(&self, captions: &[usize]) -> TrainBatch {
        let audio_rows: Vec<usize> = captions.iter().map(|&c| self.caption_audio[c]).collect();
        TrainBatch {
            audio: RowBatch { ids: audio_rows.clone(), values: self.audio.select_rows(&audio_rows) },
            text: RowBatch { ids: captions.to_vec(), values: self.text.select_rows(captions) },
        }
    }
}

impl PairDataset {
    /// Cosine similarity of every audio item (rows) with every caption
    /// (columns) under `params`.
    pub fn similarity(&self, params: &ModelParams) -> Result<DenseMatrix> {
        let a = encode(&params.audio_encoder, &RowBatch::indexed(self.audio.clone()))?;
        let t = encode(&params.text_encoder, &RowBatch::indexed(self.text.clone()))?;
        cosine_similarity_matrix(&a, &t)
    }

    /// Caption embeddings under the text encoder, one row per caption.
    pub fn caption_embeddings(&self, params: &ModelParams) -> Result<DenseMatrix> {
        Ok(encode(&params.text_encoder, &RowBatch::indexed(self.text.clone()))?.values)
    }
}

/// Cluster ids per audio item and per caption.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub audio: Vec<usize>,
    pub text: Vec<usize>,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Pretrain,
    Finetune,
    Refinetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub kind: StageKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: bool,
    pub distill: bool,
    pub cluster: bool,
    pub loss: LossConfig,
    pub peak_lr: f64,
    pub floor_lr: f64,
    /// Share of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl StageConfig {
    pub fn new(kind: StageKind) -> Self {
        let (distill, cluster) = match kind {
            StageKind::Pretrain => (false, false),
            StageKind::Finetune => (true, false),
            StageKind::Refinetune => (true, true),
        };
        Self {
            kind,
            epochs: 20,
            batch_size: 16,
            augmentation: false,
            distill,
            cluster,
            loss: LossConfig::default(),
            peak_lr: 2e-5,
            floor_lr: 1e-7,
            warmup_fraction: 0.1,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == StageKind::Pretrain && self.distill {
            bail!(Config, "distillation is not available during pretraining");
        }
        if self.cluster && self.kind != StageKind::Refinetune {
            bail!(Config, "cluster classification is only available during re-finetuning");
        }
        if self.batch_size < 2 {
            bail!(Config, "batch size must be at least 2, got {}", self.batch_size);
        }
        self.loss.validate()
    }

    /// Loss weights with inactive paths switched off.
    pub fn effective_loss(&self) -> LossConfig {
        LossConfig {
            lambda1: if self.distill { self.loss.lambda1 } else { 0.0 },
            lambda2: if self.cluster { self.loss.lambda2 } else { 0.0 },
            ..self.loss
        }
    }
}

/// Augmentation settings plus the optional word vectors that translate word
/// edits into text-feature changes.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub config: AugmentationConfig,
    pub word_vectors: Option<WordVectors>,
}

/// Optional inputs of a stage; which ones are required follows from the
/// stage switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageInputs<'a> {
    /// Frozen teacher models whose averaged similarities give soft targets.
    pub teachers: &'a [ModelParams],
    pub labels: Option<&'a PseudoLabels>,
    pub augmentation: Option<&'a Augmentation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub params: ModelParams,
    pub log: Vec<StepLog>,
}

impl StageOutcome {
    /// Mean of each loss term per epoch.
    pub fn epoch_means(&self) -> Vec<LossBreakdown> {
        let epochs = self.log.last().map_or(0, |l| l.epoch + 1);
        (0..epochs)
            .map(|e| {
                let steps: Vec<&StepLog> = self.log.iter().filter(|l| l.epoch == e).collect();
                let n = steps.len().max(1) as f64;
                let mut m = LossBreakdown::default();
                for s in &steps {
                    m.l_sup += s.loss.l_sup / n;
                    m.l_dist += s.loss.l_dist / n;
                    m.l_cls_audio += s.loss.l_cls_audio / n;
                    m.l_cls_text += s.loss.l_cls_text / n;
                    m.total += s.loss.total / n;
                }
                m
            })
            .collect()
    }
}

/// One epoch's pool: the real captions followed by freshly mixed pairs.
struct EpochPool {
    mixed: Vec<TrainingPair>,
    /// Caption whose labels a mixed pair inherits.
    mixed_source: Vec<usize>,
}

fn check_inputs(cfg: &StageConfig, params: &ModelParams, data: &PairDataset, inputs: &StageInputs) -> Result<()> {
    cfg.validate()?;
    params.validate()?;
    if data.audio.cols() != params.audio_encoder.d_in() || data.text.cols() != params.text_encoder.d_in() {
        bail!(Contract, "dataset feature widths do not match the encoders");
    }
    match (cfg.distill, inputs.teachers.is_empty()) {
        (true, true) => bail!(Config, "distillation enabled but no teacher models supplied"),
        (false, false) => bail!(Config, "teacher models supplied but distillation is disabled"),
        _ => {}
    }
    for t in inputs.teachers {
        if t.audio_encoder.d_in() != params.audio_encoder.d_in() || t.text_encoder.d_in() != params.text_encoder.d_in()
        {
            bail!(Contract, "teacher input widths differ from the student");
        }
    }
    match (cfg.cluster, inputs.labels) {
        (true, None) => bail!(Config, "cluster classification enabled but no pseudo-labels supplied"),
        (false, Some(_)) => bail!(Config, "pseudo-labels supplied but cluster classification is disabled"),
        (true, Some(l)) => {
            if l.text.len() != data.captions() || l.audio.len() != data.audios() {
                bail!(Contract, "pseudo-labels do not cover the dataset");
            }
            if l.text.iter().chain(&l.audio).any(|&x| x >= l.k) {
                bail!(Data, "pseudo-label outside [0, {})", l.k);
            }
        }
        (false, None) => {}
    }
    if cfg.augmentation {
        match inputs.augmentation {
            None => bail!(Config, "augmentation enabled but no augmentation settings supplied"),
            Some(a) => {
                a.config.validate()?;
                if let Some(wv) = &a.word_vectors {
                    if wv.dim() != data.text.cols() {
                        bail!(Contract, "word vectors have width {}, captions {}", wv.dim(), data.text.cols());
                    }
                }
            }
        }
    }
    Ok(())
}

fn pair_of(data: &PairDataset, c: usize) -> TrainingPair {
    TrainingPair {
        audio: data.audio.row(data.caption_audio[c]).to_vec(),
        text: data.text.row(c).to_vec(),
        tokens: data.tokens.as_ref().map(|t| t[c].clone()).unwrap_or_default(),
        synthetic: false,
    }
}

fn build_pool(data: &PairDataset, aug: Option<&Augmentation>, rng: &mut ChaCha8Rng) -> Result<EpochPool> {
    let mut pool = EpochPool { mixed: Vec::new(), mixed_source: Vec::new() };
    let Some(aug) = aug else { return Ok(pool) };
    let n = data.captions();
    if n < 2 {
        return Ok(pool);
    }
    for _ in 0..aug.config.mix_count {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        pool.mixed.push(mix_pairs(&pair_of(data, i), &pair_of(data, j))?);
        pool.mixed_source.push(i);
    }
    Ok(pool)
}

/// Runs `epochs x batches` AdamW steps of the stage objective and logs the
/// loss breakdown of every step (measured before the update).
pub fn run_stage(
    cfg: &StageConfig,
    mut params: ModelParams,
    data: &PairDataset,
    inputs: &StageInputs,
) -> Result<StageOutcome> {
    if cfg.cluster {
        if let Some(l) = inputs.labels {
            if params.clusters() != Some(l.k) {
                params.attach_heads(l.k, cfg.seed)?;
            }
        }
    }
    check_inputs(cfg, &params, data, inputs)?;
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(StageOutcome { params, log });
    }

    let aug = if cfg.augmentation { inputs.augmentation } else { None };
    let n = data.captions();
    let pool_len = n + aug.map_or(0, |a| if n >= 2 { a.config.mix_count } else { 0 });
    let per_epoch = pool_len / cfg.batch_size;
    if per_epoch == 0 {
        bail!(Config, "{pool_len} training pairs cannot fill one batch of {}", cfg.batch_size);
    }
    let total = (cfg.epochs * per_epoch) as u64;
    let sched = ScheduleConfig::with_warmup_fraction(total, cfg.warmup_fraction, cfg.peak_lr, cfg.floor_lr)?;
    let loss_cfg = cfg.effective_loss();
    let mut opt = OptimizerState::new(&params, cfg.optimizer);
    let word_edits = aug.and_then(|a| Some((a, a.word_vectors.as_ref()?, data.tokens.as_ref()?)));

    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ aug.map_or(0, |a| a.config.rng_seed).rotate_left(17));
        rng.set_stream(epoch as u64);
        let pool = build_pool(data, aug, &mut rng)?;
        for rows in make_batches(pool_len, cfg.batch_size, cfg.seed, epoch as u64)? {
            let mut audio = DenseMatrix::zeros(rows.len(), data.audio.cols());
            let mut text = DenseMatrix::zeros(rows.len(), data.text.cols());
            for (r, &idx) in rows.iter().enumerate() {
                if idx < n {
                    audio.row_mut(r).copy_from_slice(data.audio.row(data.caption_audio[idx]));
                    text.row_mut(r).copy_from_slice(data.text.row(idx));
                    if let Some((a, wv, tokens)) = word_edits {
                        let edited = augment_caption(&tokens[idx], &a.config, &mut rng)?;
                        if edited != tokens[idx] {
                            let (new, old) = (wv.pool(&edited), wv.pool(&tokens[idx]));
                            for ((t, x), y) in text.row_mut(r).iter_mut().zip(&new).zip(&old) {
                                *t += x - y;
                            }
                        }
                    }
                } else {
                    let m = &pool.mixed[idx - n];
                    audio.row_mut(r).copy_from_slice(&m.audio);
                    text.row_mut(r).copy_from_slice(&m.text);
                }
            }
            let batch = TrainBatch {
                audio: RowBatch { ids: rows.clone(), values: audio },
                text: RowBatch { ids: rows.clone(), values: text },
            };

            let targets = if cfg.distill {
                let sims = inputs.teachers.iter().map(|t| batch_similarity(t, &batch)).collect::<Result<Vec<_>>>()?;
                Some(teacher_soft_targets(&ensemble_average(&sims)?, sims.len(), &loss_cfg)?)
            } else {
                None
            };
            let labels = inputs.labels.filter(|_| cfg.cluster).map(|l| {
                let source = |idx: usize| if idx < n { idx } else { pool.mixed_source[idx - n] };
                BatchLabels {
                    audio: rows.iter().map(|&i| l.audio[data.caption_audio[source(i)]]).collect(),
                    text: rows.iter().map(|&i| l.text[source(i)]).collect(),
                }
            });

            let (loss, grads) = loss_and_gradients(&params, &batch, targets.as_ref(), labels.as_ref(), &loss_cfg)?;
            let lr = lr_at_step(&sched, step + 1)?;
            adamw_step(&mut opt, &mut params, &grads, lr)?;
            log.push(StepLog { epoch, step, lr, loss });
            step += 1;
        }
    }
    Ok(StageOutcome { params, log })
}
