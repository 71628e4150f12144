//! One function per subcommand. Each reads only what its config names and
//! writes only into the output directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xmrt_core::clustering::{build_pseudo_labels, cluster_embeddings};
use xmrt_core::encoders::{init_params, ModelParams};
use xmrt_core::ensemble::{
    fuse, grid_search, hierarchical_grid_search, AudioModel, EnsembleSpec, GridSearchConfig, Member, Strategy,
};
use xmrt_core::evaluation::{evaluate, MetricsReport};
use xmrt_core::fixtures::{generate_fixtures, Split};
use xmrt_core::training::{
    run_stage, Augmentation, AugmentationConfig, PairDataset, PseudoLabels, StageInputs, StageKind,
};
use xmrt_core::DenseMatrix;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::tables::{
    member_label, parse_strategy, read_labels, read_relevance, read_synonyms, read_weight_table, read_word_vectors,
    split_relevance, strategy_name, write_audio_labels, write_caption_labels, write_relevance, write_synonyms,
    write_train_log, write_weight_table, write_word_vectors, DatasetManifest, LoadedDataset, ManifestRow, SplitData,
};
use crate::tensor::{load_matrix, save_matrix};

pub const MODEL_DIR: &str = "model";
pub const METRICS_FILE: &str = "metrics.toml";
pub const STAGE_FILE: &str = "stage.toml";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = toml::to_string(value).expect("plain data serializes");
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn manifest(cfg: &RunConfig) -> CliResult<LoadedDataset> {
    let path = cfg.data.manifest.as_ref().ok_or_else(|| usage("this subcommand needs data.manifest"))?;
    DatasetManifest::load(path)
}

fn relevance_table(cfg: &RunConfig) -> CliResult<Option<HashMap<String, Vec<String>>>> {
    cfg.data.relevance.as_deref().map(read_relevance).transpose()
}

// ---------------------------------------------------------------------------

pub fn gen_fixtures(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let f = generate_fixtures(&cfg.fixture_config())?;
    save_matrix(&out.join("audio.xmrt"), &f.audio)?;
    save_matrix(&out.join("text.xmrt"), &f.text)?;
    save_matrix(&out.join("latents.xmrt"), &f.latents)?;
    let audio_id = |i: usize| format!("a{i:05}");
    let caption_id = |c: usize| format!("c{c:05}");
    let rows = (0..f.caption_audio.len())
        .map(|c| ManifestRow {
            caption_id: caption_id(c),
            audio_id: audio_id(f.caption_audio[c]),
            split: f.splits[f.caption_audio[c]],
            audio_row: f.caption_audio[c],
            text_row: c,
            caption: f.tokens[c].join(" "),
        })
        .collect();
    let m = DatasetManifest { audio_features: "audio.xmrt".into(), text_features: "text.xmrt".into(), rows };
    m.write(&out.join("manifest.tsv"))?;

    let mut entries = Vec::new();
    for split in Split::ALL {
        let items = f.split_items(split);
        let rel = f.relevance(split)?;
        for (q, c) in f.split_captions(split).into_iter().enumerate() {
            let extra: Vec<String> =
                rel.relevant[q].iter().filter(|&&j| j != rel.paired[q]).map(|&j| audio_id(items[j])).collect();
            entries.push((c, (caption_id(c), extra)));
        }
    }
    entries.sort_by_key(|(c, _)| *c);
    write_relevance(&out.join("relevance.tsv"), &entries.into_iter().map(|(_, e)| e).collect::<Vec<_>>())?;
    write_synonyms(&out.join("synonyms.tsv"), &f.synonyms)?;
    write_word_vectors(&out.join("word_vectors.tsv"), &f.word_vectors)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_dist: f64,
    pub l_cls_audio: f64,
    pub l_cls_text: f64,
    pub total: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub seed: u64,
    pub steps: usize,
    pub train_captions: usize,
    pub clusters: Option<usize>,
    pub epochs: Vec<EpochSummary>,
}

fn append_pairs(base: PairDataset, extra: PairDataset) -> CliResult<PairDataset> {
    let stack = |a: &DenseMatrix, b: &DenseMatrix| -> CliResult<DenseMatrix> {
        if a.cols() != b.cols() {
            return Err(xmrt_core::Error::Contract(format!(
                "extra pairs have width {}, expected {}",
                b.cols(),
                a.cols()
            ))
            .into());
        }
        let mut v = a.values().to_vec();
        v.extend_from_slice(b.values());
        Ok(DenseMatrix::new(a.rows() + b.rows(), a.cols(), v)?)
    };
    let offset = base.audios();
    let tokens = match (base.tokens, extra.tokens) {
        (Some(mut a), Some(b)) => {
            a.extend(b);
            Some(a)
        }
        _ => None,
    };
    Ok(PairDataset::new(
        stack(&base.audio, &extra.audio)?,
        stack(&base.text, &extra.text)?,
        base.caption_audio.iter().copied().chain(extra.caption_audio.iter().map(|a| a + offset)).collect(),
        tokens,
    )?)
}

fn stage_labels(cfg: &RunConfig, train: &SplitData) -> CliResult<PseudoLabels> {
    let path = cfg.cluster.caption_labels.as_ref().ok_or_else(|| usage("refinetune needs cluster.caption_labels"))?;
    let (by_id, k) = read_labels(path, "caption_id")?;
    let text = train
        .caption_ids
        .iter()
        .map(|c| {
            by_id
                .get(c)
                .copied()
                .ok_or_else(|| xmrt_core::Error::Data(format!("caption {c} has no cluster label")).into())
        })
        .collect::<CliResult<Vec<usize>>>()?;
    Ok(build_pseudo_labels(&text, k, &train.data.caption_audio, train.data.audios())?)
}

pub fn train(cfg: &RunConfig, kind: StageKind, out: &Path) -> CliResult<()> {
    let ds = manifest(cfg)?;
    let train = ds.split(Split::Train)?;
    let mut data = train.data.clone();
    if let Some(p) = &cfg.data.extra_pairs {
        let extra = DatasetManifest::load(p)?.split(Split::Train)?;
        data = append_pairs(data, extra.data)?;
    }
    let params = match &cfg.model.init {
        Some(dir) => load_checkpoint(dir)?,
        None => init_params(data.audio.cols(), data.text.cols(), cfg.model.d_emb, None, cfg.seed)?,
    };
    let teachers = cfg.distill.teachers.iter().map(|d| load_checkpoint(d)).collect::<CliResult<Vec<ModelParams>>>()?;
    let stage = cfg.stage_config(kind);
    if stage.distill && teachers.is_empty() {
        return Err(usage(format!("{kind:?} distills from teachers; set distill.teachers")));
    }
    let labels = if stage.cluster { Some(stage_labels(cfg, &train)?) } else { None };
    if labels.is_some() && cfg.data.extra_pairs.is_some() {
        return Err(usage("extra_pairs cannot be combined with cluster labels"));
    }
    let augmentation = if stage.augmentation {
        let synonyms = cfg.data.synonyms.as_deref().map(read_synonyms).transpose()?.unwrap_or_default();
        Some(Augmentation {
            config: AugmentationConfig {
                word_edit_probability: cfg.train.word_edit_probability,
                synonyms,
                mix_count: cfg.train.mix_count,
                rng_seed: cfg.seed,
            },
            word_vectors: cfg.data.word_vectors.as_deref().map(read_word_vectors).transpose()?,
        })
    } else {
        None
    };
    let inputs = StageInputs { teachers: &teachers, labels: labels.as_ref(), augmentation: augmentation.as_ref() };
    let outcome = run_stage(&stage, params, &data, &inputs)?;

    save_checkpoint(&out.join(MODEL_DIR), &outcome.params)?;
    write_train_log(&out.join("train_log.tsv"), &outcome.log)?;
    let summary = StageSummary {
        stage: format!("{kind:?}").to_lowercase(),
        seed: cfg.seed,
        steps: outcome.log.len(),
        train_captions: data.captions(),
        clusters: outcome.params.clusters(),
        epochs: outcome
            .epoch_means()
            .into_iter()
            .enumerate()
            .map(|(epoch, m)| EpochSummary {
                epoch,
                l_sup: m.l_sup,
                l_dist: m.l_dist,
                l_cls_audio: m.l_cls_audio,
                l_cls_text: m.l_cls_text,
                total: m.total,
            })
            .collect(),
    };
    write_toml(&out.join(STAGE_FILE), &summary)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ClusterSummary {
    clusters: usize,
    captions: usize,
    outliers_before_reassignment: usize,
    cluster_sizes: Vec<usize>,
}

pub fn cluster(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let dir = cfg
        .cluster
        .checkpoint
        .as_ref()
        .or(cfg.model.init.as_ref())
        .ok_or_else(|| usage("cluster needs cluster.checkpoint"))?;
    let params = load_checkpoint(dir)?;
    let train = manifest(cfg)?.split(Split::Train)?;
    let result = cluster_embeddings(&train.data.caption_embeddings(&params)?, &cfg.cluster_config())?;
    let labels = result.assignment.hard_labels()?;
    let k = result.assignment.k;
    let pseudo = build_pseudo_labels(&labels, k, &train.data.caption_audio, train.data.audios())?;
    write_caption_labels(
        &out.join("caption_labels.tsv"),
        &train.caption_ids,
        &labels,
        &result.assignment.probabilities,
    )?;
    write_audio_labels(&out.join("audio_labels.tsv"), &train.audio_ids, &pseudo.audio)?;
    let mut sizes = vec![0; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    write_toml(
        &out.join("cluster.toml"),
        &ClusterSummary {
            clusters: k,
            captions: labels.len(),
            outliers_before_reassignment: result.raw.outliers(),
            cluster_sizes: sizes,
        },
    )
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub split: String,
    pub mode: String,
    pub queries: usize,
    pub map_at_10: f64,
    pub map_at_16: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
}

impl MetricsFile {
    fn new(split: Split, mode: &str, r: &MetricsReport) -> Self {
        Self {
            split: split.name().into(),
            mode: mode.into(),
            queries: r.query_count,
            map_at_10: r.map_at_10,
            map_at_16: r.map_at_16,
            r_at_1: r.r_at_1,
            r_at_5: r.r_at_5,
            r_at_10: r.r_at_10,
        }
    }
}

fn check_shape(sim: &DenseMatrix, split: &SplitData, path: &Path) -> CliResult<()> {
    if sim.shape() != (split.audio_ids.len(), split.caption_ids.len()) {
        return Err(xmrt_core::Error::Contract(format!(
            "{} is {}x{}, the split has {} audio items and {} captions",
            path.display(),
            sim.rows(),
            sim.cols(),
            split.audio_ids.len(),
            split.caption_ids.len()
        ))
        .into());
    }
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let split = cfg.evaluate_split()?;
    let mode = cfg.annotation_mode()?;
    let data = manifest(cfg)?.split(split)?;
    let sim = match (&cfg.evaluate.checkpoint, &cfg.evaluate.similarity) {
        (Some(dir), None) => {
            let sim = data.data.similarity(&load_checkpoint(dir)?)?;
            save_matrix(&out.join("similarity.xmrt"), &sim)?;
            sim
        }
        (None, Some(path)) => {
            let sim = load_matrix(path)?;
            check_shape(&sim, &data, path)?;
            sim
        }
        _ => return Err(usage("evaluate needs exactly one of evaluate.checkpoint and evaluate.similarity")),
    };
    let rel = split_relevance(&data, relevance_table(cfg)?.as_ref())?;
    let report = evaluate(&sim, &rel, mode)?;
    let file = MetricsFile::new(split, &cfg.evaluate.mode, &report);
    println!(
        "{} ({} queries): mAP@10 {:.4}  mAP@16 {:.4}  R@1 {:.4}  R@5 {:.4}  R@10 {:.4}",
        split.name(),
        file.queries,
        file.map_at_10,
        file.map_at_16,
        file.r_at_1,
        file.r_at_5,
        file.r_at_10
    );
    write_toml(&out.join(METRICS_FILE), &file)
}

// ---------------------------------------------------------------------------

struct Members {
    keys: Vec<(u8, AudioModel)>,
    matrices: Vec<DenseMatrix>,
}

fn load_members(cfg: &RunConfig, split: Option<&SplitData>) -> CliResult<Members> {
    if cfg.ensemble.members.is_empty() {
        return Err(usage("ensemble.members is empty"));
    }
    let mut keys = Vec::new();
    let mut matrices = Vec::new();
    for m in &cfg.ensemble.members {
        let model = AudioModel::from_name(&m.model)
            .ok_or_else(|| usage(format!("unknown audio model {:?}; use PaSST, EAT or BEATs", m.model)))?;
        if keys.contains(&(m.system, model)) {
            return Err(usage(format!("member {} listed twice", member_label(m.system, model))));
        }
        let sim = load_matrix(&m.similarity)?;
        if let Some(s) = split {
            check_shape(&sim, s, &m.similarity)?;
        }
        keys.push((m.system, model));
        matrices.push(sim);
    }
    Ok(Members { keys, matrices })
}

#[derive(Debug, Serialize, Deserialize)]
struct SearchSummary {
    split: String,
    strategy: String,
    step: f64,
    refine_step: Option<f64>,
    objective_map_at_16: f64,
}

pub fn ensemble_search(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let split = cfg.ensemble_split()?;
    let data = manifest(cfg)?.split(split)?;
    let members = load_members(cfg, Some(&data))?;
    let rel = split_relevance(&data, relevance_table(cfg)?.as_ref())?;
    let grid_cfg = GridSearchConfig {
        step: cfg.ensemble.step,
        refine_step: cfg.ensemble.refine_step,
        max_points: cfg.ensemble.max_points,
        mode: cfg.annotation_mode()?,
    };
    let (spec, objective, label) = match cfg.ensemble.strategy.as_deref() {
        None => {
            let r = grid_search(&members.matrices, &rel, &grid_cfg)?;
            let spec = EnsembleSpec::new(
                members
                    .keys
                    .iter()
                    .zip(&r.weights)
                    .map(|(&(system, model), &weight)| Member { system, model, weight })
                    .collect(),
                Strategy::SystemFirst,
            )?;
            (spec, r.objective, "flat")
        }
        Some(s) => {
            let strategy = parse_strategy(s).ok_or_else(|| usage(format!("unknown strategy {s:?}")))?;
            let (systems, grid) = member_grid(&members)?;
            let (spec, obj) = hierarchical_grid_search(&grid, &systems, &rel, strategy, &grid_cfg)?;
            (spec, obj, strategy_name(strategy))
        }
    };
    write_weight_table(&out.join("weights.tsv"), &[("search".to_string(), spec)])?;
    println!("best validation mAP@16 {objective:.4} ({label})");
    write_toml(
        &out.join("search.toml"),
        &SearchSummary {
            split: split.name().into(),
            strategy: label.into(),
            step: cfg.ensemble.step,
            refine_step: cfg.ensemble.refine_step,
            objective_map_at_16: objective,
        },
    )
}

/// Arranges members as `systems x models` (ascending ids, models in
/// PaSST, EAT, BEATs order); every cell must be present.
fn member_grid(m: &Members) -> CliResult<(Vec<u8>, Vec<Vec<DenseMatrix>>)> {
    let mut systems: Vec<u8> = m.keys.iter().map(|k| k.0).collect();
    systems.sort_unstable();
    systems.dedup();
    let mut models: Vec<AudioModel> = m.keys.iter().map(|k| k.1).collect();
    models.sort_unstable();
    models.dedup();
    if models.len() != 1 && models != AudioModel::ALL[..models.len()] {
        return Err(usage("hierarchical search needs model slots in PaSST, EAT, BEATs order without gaps"));
    }
    let mut grid = Vec::new();
    for &s in &systems {
        let mut row = Vec::new();
        for &md in &models {
            let i = m
                .keys
                .iter()
                .position(|&k| k == (s, md))
                .ok_or_else(|| usage(format!("hierarchical search needs member {}", member_label(s, md))))?;
            row.push(m.matrices[i].clone());
        }
        grid.push(row);
    }
    Ok((systems, grid))
}

pub fn ensemble_apply(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let table_path = cfg.ensemble.weights.as_ref().ok_or_else(|| usage("ensemble-apply needs ensemble.weights"))?;
    let table = read_weight_table(table_path)?;
    let (name, spec) = match &cfg.ensemble.row {
        Some(r) => table.iter().find(|(n, _)| n == r).ok_or_else(|| usage(format!("weight table has no row {r:?}")))?,
        None => table.first().ok_or_else(|| usage("weight table is empty"))?,
    };
    let split_data = match &cfg.data.manifest {
        Some(_) => Some(manifest(cfg)?.split(cfg.ensemble_split()?)?),
        None => None,
    };
    let members = load_members(cfg, split_data.as_ref())?;
    let mut picked = Vec::new();
    let mut used = Vec::new();
    for m in &spec.members {
        match members.keys.iter().position(|&k| k == (m.system, m.model)) {
            Some(i) => {
                picked.push(members.matrices[i].clone());
                used.push(*m);
            }
            None if m.weight == 0.0 => {}
            None => {
                return Err(usage(format!(
                    "row {name} weighs {} by {} but no such member is configured",
                    member_label(m.system, m.model),
                    m.weight
                )))
            }
        }
    }
    if let Some(&(s, md)) =
        members.keys.iter().find(|&&(s, md)| !spec.members.iter().any(|m| (m.system, m.model) == (s, md)))
    {
        return Err(usage(format!("member {} has no column in the weight table", member_label(s, md))));
    }
    let fused = fuse(&picked, &EnsembleSpec::new(used, spec.strategy)?)?;
    save_matrix(&out.join("fused.xmrt"), &fused)?;
    if let Some(data) = split_data {
        let rel = split_relevance(&data, relevance_table(cfg)?.as_ref())?;
        let report = evaluate(&fused, &rel, cfg.annotation_mode()?)?;
        write_toml(&out.join(METRICS_FILE), &MetricsFile::new(cfg.ensemble_split()?, &cfg.evaluate.mode, &report))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RunEntry {
    path: String,
    stage: Option<String>,
    final_total_loss: Option<f64>,
    metrics: Option<MetricsFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Report {
    runs: Vec<RunEntry>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map(Some).map_err(|e| CliError::format(path, 0, e.to_string()))
}

pub fn report(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    if cfg.report.runs.is_empty() {
        return Err(usage("report.runs is empty"));
    }
    let mut runs = Vec::new();
    for dir in &cfg.report.runs {
        let stage: Option<StageSummary> = read_toml(&dir.join(STAGE_FILE))?;
        let metrics: Option<MetricsFile> = read_toml(&dir.join(METRICS_FILE))?;
        let label = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let line = match &metrics {
            Some(m) => format!(
                "mAP@10 {:.4}  mAP@16 {:.4}  R@1 {:.4}  R@10 {:.4}",
                m.map_at_10, m.map_at_16, m.r_at_1, m.r_at_10
            ),
            None => "no metrics".into(),
        };
        println!("{label:<24} {line}");
        runs.push(RunEntry {
            path: label,
            stage: stage.as_ref().map(|s| s.stage.clone()),
            final_total_loss: stage.as_ref().and_then(|s| s.epochs.last().map(|e| e.total)),
            metrics,
        });
    }
    write_toml(&out.join("report.toml"), &Report { runs })
}

pub fn output_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    let out = flag.or_else(|| cfg.out.clone()).ok_or_else(|| usage("no output directory; pass --out or set out"))?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    Ok(out)
}
