use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[data.synthetic]
seed = 2
train = 6
val = 3
agents = 3
polylines = 4

[model]
d_model = 16
pointnet_hidden = 16
pe_frequencies = 4
motion_tokens = 3

[model.ssm]
state = 4

[model.encoder]
layers = 1
heads = 2

[model.decoder]
head_hidden = 16

[train]
epochs = 2
batch_size = 3
seed = 4
"#;

fn hamf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hamf")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hamf(args);
    assert!(out.status.success(), "hamf {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&read(p)).unwrap()
}

/// Trains the tiny config into `dir/run` and returns the run directory.
fn trained(dir: &TempDir) -> PathBuf {
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    run
}

#[test]
fn generate_writes_files_and_manifest() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("data");
    ok(&["generate", "--seed", "3", "--count", "100", "--out", s(&out)]);
    let manifest = json(out.join("manifest.json"));
    assert_eq!(manifest["ids"].as_array().unwrap().len(), 100);
    let scenarios = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name() != "manifest.json").count();
    assert_eq!(scenarios, 100);
    ok(&["audit", "--data", s(&out)]);
}

#[test]
fn generate_is_deterministic_and_guards_existing_output() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--seed", "5", "--count", "7", "--templates", "straight,left_turn", "--out", s(&a)]);
    ok(&["generate", "--seed", "5", "--count", "7", "--templates", "straight,left_turn", "--out", s(&b)]);
    assert_eq!(read(a.join("manifest.json")), read(b.join("manifest.json")));
    assert_eq!(read(a.join("000003.json")), read(b.join("000003.json")));

    let again = hamf(&["generate", "--seed", "6", "--count", "3", "--out", s(&a)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["generate", "--seed", "6", "--count", "3", "--out", s(&a), "--force"]);
    assert_eq!(json(a.join("manifest.json"))["ids"].as_array().unwrap().len(), 3);
    assert_eq!(fs::read_dir(&a).unwrap().count(), 4);
}

#[test]
fn unknown_template_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = hamf(&["generate", "--templates", "loop", "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_predict_render() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir);
    for f in ["config.toml", "train_log.jsonl", "checkpoint.bin", "metrics.csv", "summary.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = read(run.join("train_log.jsonl"));
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 0);
    assert!(first["loss"].as_f64().unwrap().is_finite());

    let data = dir.path().join("data");
    ok(&["generate", "--seed", "9", "--count", "4", "--agents", "3", "--polylines", "4", "--out", s(&data)]);
    let ckpt = run.join("checkpoint.bin");
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&e1)]);
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&e2)]);
    let csv = read(e1.join("metrics.csv"));
    assert_eq!(csv, read(e2.join("metrics.csv")));
    assert_eq!(csv.lines().count(), 5);

    let scenario = data.join("000000.json");
    let pred = dir.path().join("pred/p.json");
    ok(&["predict", "--ckpt", s(&ckpt), "--scenario", s(&scenario), "--out", s(&pred)]);
    let p = json(&pred);
    let trajectories = p["trajectories"].as_array().unwrap();
    assert_eq!(trajectories.len(), 6);
    assert!(trajectories.iter().all(|t| t.as_array().unwrap().len() == 60));
    let total: f64 = p["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let (svg_a, svg_b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    ok(&["render", "--scenario", s(&scenario), "--predictions", s(&pred), "--out", s(&svg_a)]);
    ok(&["render", "--scenario", s(&scenario), "--predictions", s(&pred), "--out", s(&svg_b)]);
    let svg = read(&svg_a);
    assert_eq!(svg.as_bytes(), fs::read(&svg_b).unwrap().as_slice());
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert!(doc.descendants().filter(|n| n.is_element()).count() > 10);

    let other = data.join("000001.json");
    let mismatch = hamf(&["render", "--scenario", s(&other), "--predictions", s(&pred), "--out", s(&svg_b)]);
    assert!(!mismatch.status.success());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir);
    let echo = read(run.join("config.toml"));
    assert!(echo.contains("d_model = 16"));
    let rerun = dir.path().join("rerun");
    ok(&["train", "--config", s(&run.join("config.toml")), "--out", s(&rerun)]);
    assert_eq!(read(run.join("metrics.csv")), read(rerun.join("metrics.csv")));
    assert_eq!(read(run.join("train_log.jsonl")), read(rerun.join("train_log.jsonl")));
    assert_eq!(fs::read(run.join("checkpoint.bin")).unwrap(), fs::read(rerun.join("checkpoint.bin")).unwrap());
}

#[test]
fn overrides_apply_and_are_echoed() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--epochs", "1", "--lr", "0.002"]);
    assert_eq!(read(run.join("train_log.jsonl")).lines().count(), 1);
    let echo: toml::Value = toml::from_str(&read(run.join("config.toml"))).unwrap();
    assert_eq!(echo["train"]["epochs"].as_integer(), Some(1));
    assert_eq!(echo["train"]["lr"].as_float(), Some(0.002));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, format!("{TINY}\nmomentum = 0.9\n")).unwrap();
    let out = hamf(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn eval_baseline_needs_no_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--seed", "1", "--count", "5", "--out", s(&data)]);
    let out = dir.path().join("cv");
    ok(&["eval", "--baseline", "cv", "--data", s(&data), "--out", s(&out)]);
    let summary = json(out.join("summary.json"));
    assert_eq!(summary["n_scenarios"], 5);
    assert!(summary["min_fde6"].as_f64().unwrap() <= summary["min_fde1"].as_f64().unwrap());
}

#[test]
fn missing_inputs_are_errors() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--count", "2", "--out", s(&data)]);
    let missing = dir.path().join("nope.bin");
    let out = dir.path().join("o");
    assert!(!hamf(&["eval", "--ckpt", s(&missing), "--data", s(&data), "--out", s(&out)]).status.success());
    assert!(!hamf(&["eval", "--baseline", "cv", "--data", s(&missing), "--out", s(&out)]).status.success());
    assert!(!hamf(&["eval", "--data", s(&data), "--out", s(&out)]).status.success());
    let scenario = data.join("000000.json");
    assert!(!hamf(&["predict", "--ckpt", s(&missing), "--scenario", s(&scenario), "--out", s(&out)]).status.success());
}

#[test]
fn ablate_emits_tables() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("ablate.toml");
    fs::write(
        &cfg,
        r#"
seeds = [0]

[model]
d_model = 16
pointnet_hidden = 16
pe_frequencies = 4
history_steps = 10
future_steps = 12
motion_tokens = 3
ssm = { state = 4 }
encoder = { layers = 1, heads = 2 }
decoder = { head_hidden = 16 }

[train]
epochs = 1
batch_size = 2

[split]
train = 2
val = 2
agents = 3
polylines = 4
generator = { history_steps = 10, future_steps = 12 }
"#,
    )
    .unwrap();
    let out = dir.path().join("ablate");
    ok(&["ablate", "--suite", "ke", "--config", s(&cfg), "--seeds", "2", "--out", s(&out)]);
    let csv = read(out.join("ke.csv"));
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(labels, ["Ke=1", "Ke=2", "Ke=3", "Ke=6"]);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(4) == Some("2")));
    let md = read(out.join("ke.md"));
    assert!(md.contains("| Ke=6 |"));
    assert!(out.join("ke.json").is_file());
    assert!(out.join("ke_config.toml").is_file());

    let bad = hamf(&["ablate", "--suite", "width", "--out", s(&out)]);
    assert!(!bad.status.success());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = hamf_core::config::RunConfig::load(&root.join("desk.toml")).unwrap();
    assert_eq!(desk.model, hamf_core::ModelConfig::desk());
    let reference = hamf_core::config::RunConfig::load(&root.join("reference.toml")).unwrap();
    assert_eq!(reference.model, hamf_core::ModelConfig::reference());
}
