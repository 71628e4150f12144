use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xmrt_cli::tables::{write_weight_table, DatasetManifest, ManifestRow};
use xmrt_cli::tensor::{load_matrix, save_matrix};
use xmrt_core::ensemble::{load_coefficients, AudioModel, PUBLISHED_COEFFICIENTS, SYSTEMS};
use xmrt_core::fixtures::Split;
use xmrt_core::DenseMatrix;

fn xmrt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmrt")).current_dir(dir).args(args).env_remove("XMRT_SEED").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = xmrt(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_fixtures(dir: &Path) {
    write(dir, "fx.toml", "out = \"fx\"\n[fixtures]\nn_items = 80\nd_latent = 4\nd_audio = 8\nd_text = 8\n");
    ok(dir, &["gen-fixtures", "--config", "fx.toml"]);
}

const DATA: &str = "[data]\nmanifest = \"fx/manifest.tsv\"\nrelevance = \"fx/relevance.tsv\"\n";
const TRAIN: &str = "[model]\nd_emb = 8\n[train]\nepochs = 3\nbatch_size = 8\npeak_lr = 1e-2\n";

#[test]
fn identity_similarity_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let n = 6;
    save_matrix(&d.join("audio.xmrt"), &DenseMatrix::zeros(n, 2)).unwrap();
    save_matrix(&d.join("text.xmrt"), &DenseMatrix::zeros(n, 2)).unwrap();
    save_matrix(&d.join("sim.xmrt"), &DenseMatrix::identity(n)).unwrap();
    let rows = (0..n)
        .map(|i| ManifestRow {
            caption_id: format!("c{i}"),
            audio_id: format!("a{i}"),
            split: Split::Test,
            audio_row: i,
            text_row: i,
            caption: "a sound".into(),
        })
        .collect();
    DatasetManifest { audio_features: "audio.xmrt".into(), text_features: "text.xmrt".into(), rows }
        .write(&d.join("manifest.tsv"))
        .unwrap();
    write(d, "ev.toml", "out = \"ev\"\n[data]\nmanifest = \"manifest.tsv\"\n[evaluate]\nsimilarity = \"sim.xmrt\"\n");
    ok(d, &["evaluate", "--config", "ev.toml"]);
    let metrics = fs::read_to_string(d.join("ev/metrics.toml")).unwrap();
    for key in ["map_at_10", "map_at_16", "r_at_1", "r_at_5", "r_at_10"] {
        assert!(metrics.contains(&format!("{key} = 1.0\n")), "{key} in\n{metrics}");
    }
    assert!(metrics.contains("queries = 6"));
}

#[test]
fn published_row_fuses_twelve_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut members = String::new();
    let mut mats = Vec::new();
    for (s, &system) in SYSTEMS.iter().enumerate() {
        for (m, model) in AudioModel::ALL.into_iter().enumerate() {
            let k = (s * 3 + m) as f64;
            let sim = DenseMatrix::from_fn(5, 7, |i, j| ((i * 7 + j) as f64 * 0.61 + k * 1.3).sin());
            let name = format!("s{system}{}.xmrt", model.name());
            save_matrix(&d.join(&name), &sim).unwrap();
            members.push_str(&format!(
                "  {{ system = {system}, model = \"{}\", similarity = \"{name}\" }},\n",
                model.name()
            ));
            mats.push(sim);
        }
    }
    let specs = load_coefficients(&PUBLISHED_COEFFICIENTS).unwrap();
    let rows: Vec<(String, _)> = specs.iter().enumerate().map(|(i, s)| (format!("E{}", i + 1), s.clone())).collect();
    write_weight_table(&d.join("table3.tsv"), &rows).unwrap();
    write(
        d,
        "ea.toml",
        &format!("out = \"ea\"\n[ensemble]\nweights = \"table3.tsv\"\nrow = \"E1\"\nmembers = [\n{members}]\n"),
    );
    ok(d, &["ensemble-apply", "--config", "ea.toml"]);

    let fused = load_matrix(&d.join("ea/fused.xmrt")).unwrap();
    let w = PUBLISHED_COEFFICIENTS[0];
    for i in 0..5 {
        for j in 0..7 {
            let expect: f64 = mats.iter().zip(w).map(|(m, w)| w * m.get(i, j)).sum();
            assert!((fused.get(i, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn stage_chain_runs_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_fixtures(d);
    let before = snapshot(&d.join("fx"));

    for s in 1..=3 {
        write(d, &format!("t{s}.toml"), &format!("seed = {s}\nout = \"t{s}\"\n{DATA}{TRAIN}"));
        ok(d, &["pretrain", "--config", &format!("t{s}.toml")]);
    }
    let teachers = "[distill]\nteachers = [\"t1/model\", \"t2/model\", \"t3/model\"]\n";
    let augment = "synonyms = \"fx/synonyms.tsv\"\nword_vectors = \"fx/word_vectors.tsv\"\n";
    let train = "[model]\nd_emb = 8\ninit = \"t1/model\"\n[train]\nepochs = 3\nbatch_size = 8\npeak_lr = 1e-2\naugmentation = true\nmix_count = 4\n";
    write(d, "ft.toml", &format!("out = \"ft\"\n{DATA}{augment}{train}{teachers}"));
    ok(d, &["finetune", "--config", "ft.toml"]);
    write(d, "cl.toml", &format!("out = \"cl\"\n{DATA}[cluster]\ncheckpoint = \"ft/model\"\nmin_cluster_size = 3\n"));
    ok(d, &["cluster", "--config", "cl.toml"]);
    write(
        d,
        "rft.toml",
        &format!("out = \"rft\"\n{DATA}{TRAIN}{teachers}[cluster]\ncaption_labels = \"cl/caption_labels.tsv\"\n")
            .replace("d_emb = 8\n", "d_emb = 8\ninit = \"ft/model\"\n"),
    );
    ok(d, &["refinetune", "--config", "rft.toml"]);
    assert!(d.join("rft/model/audio_head.w2.xmrt").exists());
    let stage = fs::read_to_string(d.join("rft/stage.toml")).unwrap();
    assert!(stage.contains("stage = \"refinetune\""));

    write(d, "ev.toml", &format!("out = \"rft\"\n{DATA}[evaluate]\ncheckpoint = \"rft/model\"\n"));
    ok(d, &["evaluate", "--config", "ev.toml"]);
    write(d, "rp.toml", "out = \"rp\"\n[report]\nruns = [\"t1\", \"ft\", \"rft\"]\n");
    ok(d, &["report", "--config", "rp.toml"]);
    assert!(fs::read_to_string(d.join("rp/report.toml")).unwrap().contains("map_at_10"));

    assert_eq!(snapshot(&d.join("fx")), before);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_fixtures(d);
    write(d, "pre.toml", &format!("seed = 5\n{DATA}{TRAIN}augmentation = true\n"));
    ok(d, &["pretrain", "--config", "pre.toml", "--out", "a"]);
    ok(d, &["pretrain", "--config", "pre.toml", "--out", "b"]);
    assert_eq!(snapshot(&d.join("a")), snapshot(&d.join("b")));
    let out = xmrt(d, &["pretrain", "--config", "pre.toml", "--out", "c", "--seed", "6"]);
    assert!(out.status.success());
    assert_ne!(snapshot(&d.join("a")), snapshot(&d.join("c")));
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_fixtures(d);
    write(d, "pre.toml", &format!("{DATA}{TRAIN}"));
    let run = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_xmrt"));
        cmd.current_dir(d).args(["pretrain", "--config", "pre.toml", "--out", out]).env_remove("XMRT_SEED");
        if let Some(v) = env {
            cmd.env("XMRT_SEED", v);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(d.join(out).join("stage.toml")).unwrap()
    };
    assert!(run("env", Some("9"), None).contains("seed = 9"));
    assert!(run("flag", Some("9"), Some("4")).contains("seed = 4"));
}

#[test]
fn hierarchical_search_writes_a_full_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_fixtures(d);
    let mut members = String::new();
    for (k, (system, model)) in [(2, "PaSST"), (2, "EAT"), (3, "PaSST"), (3, "EAT")].into_iter().enumerate() {
        write(d, &format!("p{k}.toml"), &format!("seed = {k}\nout = \"p{k}\"\n{DATA}{TRAIN}"));
        ok(d, &["pretrain", "--config", &format!("p{k}.toml")]);
        write(
            d,
            &format!("e{k}.toml"),
            &format!("out = \"p{k}\"\n{DATA}[evaluate]\nsplit = \"val\"\ncheckpoint = \"p{k}/model\"\n"),
        );
        ok(d, &["evaluate", "--config", &format!("e{k}.toml")]);
        members
            .push_str(&format!("{{ system = {system}, model = \"{model}\", similarity = \"p{k}/similarity.xmrt\" }},"));
    }
    let base = format!("{DATA}[ensemble]\nstep = 0.25\nmembers = [{members}]\n");
    write(d, "es.toml", &format!("out = \"es\"\n{base}strategy = \"model-first\"\n"));
    ok(d, &["ensemble-search", "--config", "es.toml"]);
    let table = fs::read_to_string(d.join("es/weights.tsv")).unwrap();
    assert!(table.starts_with("row\tstrategy\t2:PaSST\t2:EAT\t3:PaSST\t3:EAT\nsearch\tmodel-first\t"), "{table}");

    write(d, "ea.toml", &format!("out = \"ea\"\n{base}weights = \"es/weights.tsv\"\n"));
    ok(d, &["ensemble-apply", "--config", "ea.toml"]);
    let search = fs::read_to_string(d.join("es/search.toml")).unwrap();
    let applied = fs::read_to_string(d.join("ea/metrics.toml")).unwrap();
    let grab =
        |s: &str, key: &str| s.lines().find(|l| l.starts_with(key)).unwrap().split(" = ").nth(1).unwrap().to_string();
    assert_eq!(grab(&search, "objective_map_at_16"), grab(&applied, "map_at_16"));
}

#[test]
fn usage_errors_exit_two_and_data_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(xmrt(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(xmrt(d, &["evaluate"]).status.code(), Some(2));
    assert_eq!(xmrt(d, &["evaluate", "--config", "missing.toml"]).status.code(), Some(2));
    write(d, "bad.toml", "out = \"o\"\nbogus = 1\n");
    assert_eq!(xmrt(d, &["evaluate", "--config", "bad.toml"]).status.code(), Some(2));
    write(d, "nopath.toml", "out = \"o\"\n[evaluate]\nsimilarity = \"nope.xmrt\"\n");
    assert_eq!(xmrt(d, &["evaluate", "--config", "nopath.toml"]).status.code(), Some(2));
    write(d, "noout.toml", "");
    assert_eq!(xmrt(d, &["gen-fixtures", "--config", "noout.toml"]).status.code(), Some(2));
    let out = xmrt(d, &["gen-fixtures", "--config", "noout.toml", "--seed", "x"]);
    assert_eq!(out.status.code(), Some(2));

    small_fixtures(d);
    fs::write(d.join("junk.xmrt"), b"XMRT\x01\x00\x02garbage").unwrap();
    write(d, "ev.toml", &format!("out = \"o\"\n{DATA}[evaluate]\nsimilarity = \"junk.xmrt\"\n"));
    let out = xmrt(d, &["evaluate", "--config", "ev.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("junk.xmrt"));
}
