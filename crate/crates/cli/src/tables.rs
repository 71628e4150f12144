//! Tab-separated text formats: dataset manifest, relevance lists, cluster
//! labels, ensemble weight tables, synonyms, word vectors and training logs.
//!
//! Lines starting with `#` carry `key=value` metadata or comments; the first
//! non-`#` line is the column header. Floats are written in shortest
//! round-trip form, so reading a written table gives back identical values.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use xmrt_core::ensemble::{AudioModel, EnsembleSpec, Member, Strategy};
use xmrt_core::evaluation::RelevanceMap;
use xmrt_core::fixtures::Split;
use xmrt_core::training::{PairDataset, StepLog, SynonymTable, WordVectors};
use xmrt_core::DenseMatrix;

use crate::error::{CliError, CliResult};
use crate::tensor::load_matrix;

struct Table {
    meta: BTreeMap<String, String>,
    /// `(line number, fields)` of every data row.
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path, header: &[&str], exact: bool) -> CliResult<Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut meta = BTreeMap::new();
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if !seen_header {
            let ok = if exact {
                fields == header
            } else {
                fields.len() >= header.len() && fields[..header.len()] == *header
            };
            if !ok {
                return Err(CliError::format(path, lineno, format!("expected header {}", header.join("\\t"))));
            }
            seen_header = true;
            continue;
        }
        rows.push((lineno, fields));
    }
    if !seen_header {
        return Err(CliError::format(path, 0, "missing header line"));
    }
    Ok(Table { meta, rows })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> CliResult<T> {
    field.parse().map_err(|_| CliError::format(path, line, format!("cannot parse {what} from {field:?}")))
}

fn need(path: &Path, line: usize, fields: &[String], n: usize) -> CliResult<()> {
    if fields.len() < n {
        return Err(CliError::format(path, line, format!("expected {n} columns, found {}", fields.len())));
    }
    Ok(())
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\t")
}

// ---------------------------------------------------------------------------
// manifest

pub const MANIFEST_HEADER: [&str; 6] = ["caption_id", "audio_id", "split", "audio_row", "text_row", "caption"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub caption_id: String,
    pub audio_id: String,
    pub split: Split,
    pub audio_row: usize,
    pub text_row: usize,
    /// Space-separated caption words.
    pub caption: String,
}

/// One line per caption; feature tensors are referenced relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub audio_features: PathBuf,
    pub text_features: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// A manifest with its feature tensors loaded.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub audio: DenseMatrix,
    pub text: DenseMatrix,
}

/// Pairs of one split plus the ids behind every row.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub data: PairDataset,
    pub audio_ids: Vec<String>,
    pub caption_ids: Vec<String>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut s = String::new();
        writeln!(s, "#audio_features={}", self.audio_features.display()).unwrap();
        writeln!(s, "#text_features={}", self.text_features.display()).unwrap();
        writeln!(s, "{}", MANIFEST_HEADER.join("\t")).unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.caption_id,
                r.audio_id,
                r.split.name(),
                r.audio_row,
                r.text_row,
                r.caption
            )
            .unwrap();
        }
        write_file(path, &s)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let t = read_table(path, &MANIFEST_HEADER, true)?;
        let meta = |k: &str| {
            t.meta.get(k).map(PathBuf::from).ok_or_else(|| CliError::format(path, 0, format!("missing #{k}= line")))
        };
        let (audio_features, text_features) = (meta("audio_features")?, meta("text_features")?);
        let mut rows = Vec::with_capacity(t.rows.len());
        let mut caption_ids = HashMap::new();
        let mut audio_of: HashMap<String, (usize, Split)> = HashMap::new();
        for (line, f) in &t.rows {
            need(path, *line, f, 6)?;
            let split = Split::from_name(&f[2])
                .ok_or_else(|| CliError::format(path, *line, format!("unknown split {:?}", f[2])))?;
            let row = ManifestRow {
                caption_id: f[0].clone(),
                audio_id: f[1].clone(),
                split,
                audio_row: parse(path, *line, &f[3], "audio_row")?,
                text_row: parse(path, *line, &f[4], "text_row")?,
                caption: f[5].clone(),
            };
            if caption_ids.insert(row.caption_id.clone(), *line).is_some() {
                return Err(CliError::format(path, *line, format!("duplicate caption id {}", row.caption_id)));
            }
            match audio_of.get(&row.audio_id) {
                Some(&prev) if prev != (row.audio_row, split) => {
                    return Err(CliError::format(path, *line, format!("audio {} changes row or split", row.audio_id)));
                }
                _ => {
                    audio_of.insert(row.audio_id.clone(), (row.audio_row, split));
                }
            }
            rows.push(row);
        }
        let mut row_owner = HashMap::new();
        for (id, (r, _)) in &audio_of {
            if let Some(other) = row_owner.insert(*r, id) {
                return Err(CliError::format(path, 0, format!("audio ids {other} and {id} share audio row {r}")));
            }
        }
        Ok(Self { audio_features, text_features, rows })
    }

    /// Reads the manifest and the feature tensors it references.
    pub fn load(path: &Path) -> CliResult<LoadedDataset> {
        let manifest = Self::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let audio = load_matrix(&base.join(&manifest.audio_features))?;
        let text = load_matrix(&base.join(&manifest.text_features))?;
        for r in &manifest.rows {
            if r.audio_row >= audio.rows() || r.text_row >= text.rows() {
                return Err(CliError::format(
                    path,
                    0,
                    format!("caption {} references a row outside the tensors", r.caption_id),
                ));
            }
        }
        Ok(LoadedDataset { manifest, audio, text })
    }
}

impl LoadedDataset {
    /// Captions of `split` in manifest order; audio items ordered by row.
    pub fn split(&self, split: Split) -> CliResult<SplitData> {
        let rows: Vec<&ManifestRow> = self.manifest.rows.iter().filter(|r| r.split == split).collect();
        if rows.is_empty() {
            return Err(xmrt_core::Error::Data(format!("split {} has no captions", split.name())).into());
        }
        let mut audio_rows: Vec<(usize, &str)> = rows.iter().map(|r| (r.audio_row, r.audio_id.as_str())).collect();
        audio_rows.sort_unstable();
        audio_rows.dedup();
        let local = |row: usize| audio_rows.binary_search_by_key(&row, |(r, _)| *r).expect("row present");
        let text_rows: Vec<usize> = rows.iter().map(|r| r.text_row).collect();
        let tokens: Vec<Vec<String>> =
            rows.iter().map(|r| r.caption.split_whitespace().map(str::to_string).collect()).collect();
        let data = PairDataset::new(
            self.audio.select_rows(&audio_rows.iter().map(|(r, _)| *r).collect::<Vec<_>>()),
            self.text.select_rows(&text_rows),
            rows.iter().map(|r| local(r.audio_row)).collect(),
            if tokens.iter().all(|t| !t.is_empty()) { Some(tokens) } else { None },
        )?;
        Ok(SplitData {
            data,
            audio_ids: audio_rows.iter().map(|(_, id)| id.to_string()).collect(),
            caption_ids: rows.iter().map(|r| r.caption_id.clone()).collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// relevance

pub const RELEVANCE_HEADER: [&str; 2] = ["caption_id", "relevant_audio_ids"];

/// Extra relevant audio ids per caption id, comma-separated.
pub fn write_relevance(path: &Path, entries: &[(String, Vec<String>)]) -> CliResult<()> {
    let mut s = format!("{}\n", RELEVANCE_HEADER.join("\t"));
    for (c, ids) in entries {
        writeln!(s, "{c}\t{}", ids.join(",")).unwrap();
    }
    write_file(path, &s)
}

pub fn read_relevance(path: &Path) -> CliResult<HashMap<String, Vec<String>>> {
    let t = read_table(path, &RELEVANCE_HEADER, true)?;
    let mut out = HashMap::new();
    for (line, f) in &t.rows {
        need(path, *line, f, 1)?;
        let ids = f.get(1).map_or(Vec::new(), |s| s.split(',').filter(|x| !x.is_empty()).map(str::to_string).collect());
        if out.insert(f[0].clone(), ids).is_some() {
            return Err(CliError::format(path, *line, format!("duplicate caption id {}", f[0])));
        }
    }
    Ok(out)
}

/// Relevance of a split's captions against its audio gallery. Without a
/// relevance table every caption has only its paired audio.
pub fn split_relevance(split: &SplitData, table: Option<&HashMap<String, Vec<String>>>) -> CliResult<RelevanceMap> {
    let index: HashMap<&str, usize> = split.audio_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut relevant = Vec::with_capacity(split.caption_ids.len());
    for c in &split.caption_ids {
        let mut set = Vec::new();
        for id in table.and_then(|t| t.get(c)).into_iter().flatten() {
            let i = index.get(id.as_str()).ok_or_else(|| {
                xmrt_core::Error::Data(format!("caption {c} lists audio {id}, which is not in the same split"))
            })?;
            set.push(*i);
        }
        relevant.push(set);
    }
    Ok(RelevanceMap::new(split.data.caption_audio.clone(), relevant, split.audio_ids.len())?)
}

// ---------------------------------------------------------------------------
// cluster labels

/// `caption_id, label, p0 .. p{K-1}`.
pub fn write_caption_labels(path: &Path, ids: &[String], labels: &[usize], probs: &DenseMatrix) -> CliResult<()> {
    let mut s = String::from("caption_id\tlabel");
    for k in 0..probs.cols() {
        write!(s, "\tp{k}").unwrap();
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        writeln!(s, "{id}\t{}\t{}", labels[i], join_floats(probs.row(i))).unwrap();
    }
    write_file(path, &s)
}

pub fn write_audio_labels(path: &Path, ids: &[String], labels: &[usize]) -> CliResult<()> {
    let mut s = String::from("audio_id\tlabel\n");
    for (id, l) in ids.iter().zip(labels) {
        writeln!(s, "{id}\t{l}").unwrap();
    }
    write_file(path, &s)
}

/// Labels by id plus the cluster count (number of probability columns for
/// caption tables, one more than the largest label otherwise).
pub fn read_labels(path: &Path, id_column: &str) -> CliResult<(HashMap<String, usize>, usize)> {
    let t = read_table(path, &[id_column, "label"], false)?;
    let mut out = HashMap::new();
    let mut k = 0;
    for (line, f) in &t.rows {
        need(path, *line, f, 2)?;
        let label: usize = parse(path, *line, &f[1], "label")?;
        k = k.max(label + 1).max(f.len() - 2);
        if out.insert(f[0].clone(), label).is_some() {
            return Err(CliError::format(path, *line, format!("duplicate id {}", f[0])));
        }
    }
    Ok((out, k))
}

// ---------------------------------------------------------------------------
// ensemble weights

pub fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::SystemFirst => "system-first",
        Strategy::ModelFirst => "model-first",
    }
}

pub fn parse_strategy(s: &str) -> Option<Strategy> {
    match s {
        "system-first" => Some(Strategy::SystemFirst),
        "model-first" => Some(Strategy::ModelFirst),
        _ => None,
    }
}

pub fn member_label(system: u8, model: AudioModel) -> String {
    format!("{system}:{}", model.name())
}

pub fn parse_member_label(s: &str) -> Option<(u8, AudioModel)> {
    let (sys, model) = s.split_once(':')?;
    Some((sys.parse().ok()?, AudioModel::from_name(model)?))
}

/// Rows of named weight vectors over `system:model` columns.
pub fn write_weight_table(path: &Path, rows: &[(String, EnsembleSpec)]) -> CliResult<()> {
    let Some((_, first)) = rows.first() else {
        return write_file(path, "row\tstrategy\n");
    };
    let mut s = String::from("row\tstrategy");
    for m in &first.members {
        write!(s, "\t{}", member_label(m.system, m.model)).unwrap();
    }
    s.push('\n');
    for (name, spec) in rows {
        let same = spec.members.len() == first.members.len()
            && spec.members.iter().zip(&first.members).all(|(a, b)| (a.system, a.model) == (b.system, b.model));
        if !same {
            return Err(xmrt_core::Error::Contract("weight table rows must share member columns".into()).into());
        }
        writeln!(s, "{name}\t{}\t{}", strategy_name(spec.strategy), join_floats(&spec.weights())).unwrap();
    }
    write_file(path, &s)
}

pub fn read_weight_table(path: &Path) -> CliResult<Vec<(String, EnsembleSpec)>> {
    let t = read_table(path, &["row", "strategy"], false)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let header = text.lines().find(|l| !l.starts_with('#') && !l.trim().is_empty()).unwrap_or_default();
    let columns = header
        .split('\t')
        .skip(2)
        .map(|c| parse_member_label(c).ok_or_else(|| CliError::format(path, 1, format!("bad member column {c:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    let mut out = Vec::new();
    for (line, f) in &t.rows {
        need(path, *line, f, columns.len() + 2)?;
        let strategy = parse_strategy(&f[1])
            .ok_or_else(|| CliError::format(path, *line, format!("unknown strategy {:?}", f[1])))?;
        let members = columns
            .iter()
            .zip(&f[2..])
            .map(|(&(system, model), w)| Ok(Member { system, model, weight: parse(path, *line, w, "weight")? }))
            .collect::<CliResult<Vec<_>>>()?;
        let spec = EnsembleSpec::new(members, strategy).map_err(|e| CliError::format(path, *line, e.to_string()))?;
        out.push((f[0].clone(), spec));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// augmentation resources

pub fn write_synonyms(path: &Path, table: &SynonymTable) -> CliResult<()> {
    let mut s = String::from("word\tsynonyms\n");
    for (w, syn) in table.iter() {
        writeln!(s, "{w}\t{}", syn.join(",")).unwrap();
    }
    write_file(path, &s)
}

pub fn read_synonyms(path: &Path) -> CliResult<SynonymTable> {
    let t = read_table(path, &["word", "synonyms"], true)?;
    let mut table = SynonymTable::new();
    for (line, f) in &t.rows {
        need(path, *line, f, 2)?;
        table.insert(f[0].clone(), f[1].split(',').filter(|x| !x.is_empty()).map(str::to_string).collect());
    }
    Ok(table)
}

pub fn write_word_vectors(path: &Path, wv: &WordVectors) -> CliResult<()> {
    let mut s = format!("#dim={}\nword\tvector\n", wv.dim());
    for (w, v) in wv.iter() {
        writeln!(s, "{w}\t{}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")).unwrap();
    }
    write_file(path, &s)
}

pub fn read_word_vectors(path: &Path) -> CliResult<WordVectors> {
    let t = read_table(path, &["word", "vector"], true)?;
    let dim: usize = t
        .meta
        .get("dim")
        .ok_or_else(|| CliError::format(path, 0, "missing #dim= line"))
        .and_then(|d| parse(path, 0, d, "dim"))?;
    let mut wv = WordVectors::new(dim);
    for (line, f) in &t.rows {
        need(path, *line, f, 2)?;
        let v =
            f[1].split_whitespace().map(|x| parse(path, *line, x, "vector entry")).collect::<CliResult<Vec<f64>>>()?;
        wv.insert(f[0].clone(), v).map_err(|e| CliError::format(path, *line, e.to_string()))?;
    }
    Ok(wv)
}

// ---------------------------------------------------------------------------
// training log

pub fn write_train_log(path: &Path, log: &[StepLog]) -> CliResult<()> {
    let mut s = String::from("epoch\tstep\tlr\tl_sup\tl_dist\tl_cls_audio\tl_cls_text\ttotal\n");
    for e in log {
        let l = &e.loss;
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            e.epoch,
            e.step,
            e.lr,
            join_floats(&[l.l_sup, l.l_dist, l.l_cls_audio, l.l_cls_text, l.total])
        )
        .unwrap();
    }
    write_file(path, &s)
}
