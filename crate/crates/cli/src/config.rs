//! TOML run configuration.
//!
//! Every section is optional and every key has a default; unknown keys are
//! rejected. Relative paths are resolved against the directory holding the
//! config file and must exist when the config is loaded.
//!
//! ```toml
//! seed = 7
//! out = "runs/pretrain"
//!
//! [fixtures]          # gen-fixtures
//! n_items = 256
//! d_latent = 8
//! d_audio = 16
//! d_text = 16
//! noise_sigma = 0.05
//! captions_per_audio = 1
//!
//! [data]
//! manifest = "fixtures/manifest.tsv"
//! relevance = "fixtures/relevance.tsv"    # optional
//! synonyms = "fixtures/synonyms.tsv"      # optional, word edits
//! word_vectors = "fixtures/word_vectors.tsv"
//! extra_pairs = "mixed/manifest.tsv"      # optional, appended to train
//!
//! [model]
//! d_emb = 32
//! init = "runs/pretrain/model"            # optional starting checkpoint
//!
//! [train]
//! epochs = 20
//! batch_size = 16
//! peak_lr = 2e-5
//! floor_lr = 1e-7
//! warmup_fraction = 0.1
//! augmentation = false
//! mix_count = 0
//! word_edit_probability = 0.8
//!
//! [loss]              # tau, lambda1, lambda2
//! [optimizer]         # beta1, beta2, eps, weight_decay
//!
//! [distill]
//! teachers = ["runs/t1/model", "runs/t2/model", "runs/t3/model"]
//!
//! [cluster]
//! checkpoint = "runs/finetune/model"     # embeds the train captions
//! reduced_dim = 5
//! min_cluster_size = 5
//! radius = 0.5                           # optional, estimated otherwise
//! caption_labels = "runs/cluster/caption_labels.tsv"   # refinetune input
//!
//! [evaluate]
//! checkpoint = "runs/refinetune/model"   # or: similarity = "sim.xmrt"
//! split = "test"
//! mode = "multiple"                      # or "single"
//!
//! [ensemble]
//! split = "val"
//! members = [{ system = 2, model = "PaSST", similarity = "s2p.xmrt" }]
//! step = 0.01
//! refine_step = 0.0025                   # optional
//! max_points = 200000
//! strategy = "system-first"             # optional: hierarchical search
//! weights = "weights.tsv"                # ensemble-apply
//! row = "E1"
//!
//! [report]
//! runs = ["runs/pretrain", "runs/finetune"]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use xmrt_core::clustering::ClusterConfig;
use xmrt_core::evaluation::AnnotationMode;
use xmrt_core::fixtures::{FixtureConfig, Split};
use xmrt_core::losses::LossConfig;
use xmrt_core::training::{AdamWConfig, StageConfig, StageKind};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "XMRT_SEED";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub fixtures: FixturesSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub distill: DistillSection,
    pub cluster: ClusterSection,
    pub evaluate: EvaluateSection,
    pub ensemble: EnsembleSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixturesSection {
    pub n_items: usize,
    pub d_latent: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub noise_sigma: f64,
    pub captions_per_audio: usize,
}

impl Default for FixturesSection {
    fn default() -> Self {
        Self { n_items: 256, d_latent: 8, d_audio: 16, d_text: 16, noise_sigma: 0.05, captions_per_audio: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub relevance: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub extra_pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_emb: usize,
    pub init: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { d_emb: 32, init: None }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_fraction: f64,
    pub augmentation: bool,
    pub mix_count: usize,
    pub word_edit_probability: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = StageConfig::new(StageKind::Pretrain);
        Self {
            epochs: s.epochs,
            batch_size: s.batch_size,
            peak_lr: s.peak_lr,
            floor_lr: s.floor_lr,
            warmup_fraction: s.warmup_fraction,
            augmentation: false,
            mix_count: 0,
            word_edit_probability: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self { tau: l.tau, lambda1: l.lambda1, lambda2: l.lambda2 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self { beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub teachers: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub checkpoint: Option<PathBuf>,
    pub reduced_dim: usize,
    pub min_cluster_size: usize,
    pub radius: Option<f64>,
    pub caption_labels: Option<PathBuf>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let c = ClusterConfig::default();
        Self {
            checkpoint: None,
            reduced_dim: c.reduced_dim,
            min_cluster_size: c.min_cluster_size,
            radius: c.neighborhood_radius,
            caption_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub checkpoint: Option<PathBuf>,
    pub similarity: Option<PathBuf>,
    pub split: String,
    pub mode: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { checkpoint: None, similarity: None, split: "test".into(), mode: "multiple".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSection {
    pub system: u8,
    pub model: String,
    pub similarity: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub split: String,
    pub members: Vec<MemberSection>,
    pub step: f64,
    pub refine_step: Option<f64>,
    pub max_points: usize,
    pub strategy: Option<String>,
    pub weights: Option<PathBuf>,
    pub row: Option<String>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            split: "val".into(),
            members: Vec::new(),
            step: 0.01,
            refine_step: None,
            max_points: 200_000,
            strategy: None,
            weights: None,
            row: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub runs: Vec<PathBuf>,
}

fn resolve(base: &Path, p: &mut PathBuf, check: bool) -> CliResult<()> {
    if p.is_relative() {
        *p = base.join(&*p);
    }
    if check && !p.exists() {
        return Err(CliError::Usage(format!("configured path {} does not exist", p.display())));
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        let inputs: Vec<&mut PathBuf> = [
            cfg.data.manifest.as_mut(),
            cfg.data.relevance.as_mut(),
            cfg.data.synonyms.as_mut(),
            cfg.data.word_vectors.as_mut(),
            cfg.data.extra_pairs.as_mut(),
            cfg.model.init.as_mut(),
            cfg.cluster.checkpoint.as_mut(),
            cfg.cluster.caption_labels.as_mut(),
            cfg.evaluate.checkpoint.as_mut(),
            cfg.evaluate.similarity.as_mut(),
            cfg.ensemble.weights.as_mut(),
        ]
        .into_iter()
        .flatten()
        .chain(cfg.distill.teachers.iter_mut())
        .chain(cfg.ensemble.members.iter_mut().map(|m| &mut m.similarity))
        .chain(cfg.report.runs.iter_mut())
        .collect();
        for p in inputs {
            resolve(base, p, true)?;
        }
        if let Some(out) = cfg.out.as_mut() {
            resolve(base, out, false)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies the seed overrides: `--seed` first, then `XMRT_SEED`.
    pub fn apply_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> CliResult<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(v) = env {
            self.seed = v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn fixture_config(&self) -> FixtureConfig {
        let f = &self.fixtures;
        FixtureConfig {
            n_items: f.n_items,
            d_latent: f.d_latent,
            d_audio: f.d_audio,
            d_text: f.d_text,
            noise_sigma: f.noise_sigma,
            seed: self.seed,
            captions_per_audio: f.captions_per_audio,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { tau: self.loss.tau, lambda1: self.loss.lambda1, lambda2: self.loss.lambda2 }
    }

    pub fn stage_config(&self, kind: StageKind) -> StageConfig {
        let t = &self.train;
        let o = &self.optimizer;
        StageConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            augmentation: t.augmentation,
            loss: self.loss_config(),
            peak_lr: t.peak_lr,
            floor_lr: t.floor_lr,
            warmup_fraction: t.warmup_fraction,
            optimizer: AdamWConfig { beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay },
            seed: self.seed,
            ..StageConfig::new(kind)
        }
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            reduced_dim: self.cluster.reduced_dim,
            min_cluster_size: self.cluster.min_cluster_size,
            neighborhood_radius: self.cluster.radius,
            seed: self.seed,
        }
    }

    pub fn evaluate_split(&self) -> CliResult<Split> {
        parse_split(&self.evaluate.split)
    }

    pub fn ensemble_split(&self) -> CliResult<Split> {
        parse_split(&self.ensemble.split)
    }

    pub fn annotation_mode(&self) -> CliResult<AnnotationMode> {
        match self.evaluate.mode.as_str() {
            "multiple" => Ok(AnnotationMode::Multiple),
            "single" => Ok(AnnotationMode::Single),
            other => Err(CliError::Usage(format!("evaluate.mode must be \"multiple\" or \"single\", got {other:?}"))),
        }
    }
}

fn parse_split(s: &str) -> CliResult<Split> {
    Split::from_name(s).ok_or_else(|| CliError::Usage(format!("unknown split {s:?}; use train, val or test")))
}
