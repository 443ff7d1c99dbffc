use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use softtriple::checkpoint::Checkpoint;
use softtriple::linalg::{rng_for, streams};
use softtriple::losses::CenterBank;
use softtriple::model::{Architecture, EmbeddingModel};
use softtriple::trainer::init_centers;
use tempfile::TempDir;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softtriple"))
        .args(args)
        .env_remove("SOFTTRIPLE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn losses(metrics: &Path) -> Vec<f64> {
    fs::read_to_string(metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect()
}

/// Small data set plus a short training run; returns (data, run directory).
fn trained(dir: &TempDir, extra: &[&str]) -> (String, PathBuf) {
    let data = path(dir, "data.csv");
    if !Path::new(&data).exists() {
        ok(&["gen", "--classes", "6", "--per-cluster", "10", "--dim", "8", "--seed", "3", "--out", &data]);
    }
    let run = dir.path().join(format!("run{}", extra.join("_").replace(['-', '.'], "")));
    let run_s = run.to_string_lossy().into_owned();
    let mut args = vec!["train", "--data", &data, "--hidden", "8", "--out-dir", &run_s];
    for (flag, default) in [("--epochs", "3"), ("--dim", "4")] {
        if !extra.contains(&flag) {
            args.extend([flag, default]);
        }
    }
    args.extend_from_slice(extra);
    ok(&args);
    (data, run)
}

#[test]
fn gen_writes_expected_rows_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(&dir, "a.csv"), path(&dir, "b.csv"));
    for out in [&a, &b] {
        ok(&["gen", "--classes", "20", "--clusters", "3", "--per-cluster", "34", "--dim", "32", "--seed", "1", "--out", out]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 2041);
    assert!(text.starts_with("label,f1,"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(format!("{a}.clusters")).unwrap().lines().count(), 2041);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(format!("{a}.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["config"]["seed"], 1);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(&dir, "a.csv"), path(&dir, "b.csv"));
    ok(&["gen", "--classes", "3", "--per-cluster", "4", "--seed", "9", "--out", &a]);
    let out = Command::new(env!("CARGO_BIN_EXE_softtriple"))
        .args(["gen", "--classes", "3", "--per-cluster", "4", "--out", &b])
        .env("SOFTTRIPLE_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn usage_and_io_failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["gen", "--classes", "0", "--out", &path(&dir, "x.csv")]).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
    let missing = path(&dir, "missing.csv");
    assert_eq!(cli(&["train", "--data", &missing, "--out-dir", &path(&dir, "r")]).status.code(), Some(2));
    let unwritable = path(&dir, "no/such/dir/x.csv");
    assert_eq!(cli(&["gen", "--classes", "2", "--out", &unwritable]).status.code(), Some(2));
}

#[test]
fn single_center_with_regularizer_names_the_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(&dir, "d.csv");
    ok(&["gen", "--classes", "4", "--per-cluster", "3", "--out", &data]);
    let out = cli(&["train", "--data", &data, "--K", "1", "--tau", "0.2", "--out-dir", &path(&dir, "r")]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--K 1") && err.contains("--tau"), "{err}");
}

#[test]
fn softmax_matches_single_center_softtriple() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = trained(&dir, &["--loss", "softmax"]);
    let (_, b) = trained(&dir, &["--loss", "softtriple", "--K", "1", "--delta", "0", "--tau", "0"]);
    let (la, lb) = (losses(&a.join("metrics.jsonl")), losses(&b.join("metrics.jsonl")));
    assert_eq!(la.len(), 4);
    for (x, y) in la.iter().zip(&lb) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{la:?} vs {lb:?}");
    }
}

#[test]
fn zero_epochs_leaves_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(&dir, &["--epochs", "0", "--K", "3", "--seed", "11"]);
    let ckpt = Checkpoint::load(&run.join("checkpoint.txt")).unwrap();
    let model = EmbeddingModel::new(Architecture::Mlp { hidden: 8 }, 8, 4, &mut rng_for(11, streams::MODEL)).unwrap();
    assert_eq!(ckpt.model, model);
    assert_eq!(ckpt.centers, init_centers(3, 3, 4, 11).unwrap());
    assert_eq!(losses(&run.join("metrics.jsonl")).len(), 1);
}

#[test]
fn eval_on_separable_identity_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(&dir, "sep.csv");
    ok(&["gen", "--classes", "6", "--clusters", "1", "--per-cluster", "8", "--dim", "16", "--sigma", "0.01", "--out", &data]);
    let run = path(&dir, "ident");
    ok(&["train", "--data", &data, "--arch", "identity", "--loss", "softmax", "--epochs", "0", "--out-dir", &run]);
    let ckpt = format!("{run}/checkpoint.txt");
    let first = ok(&["eval", "--checkpoint", &ckpt, "--data", &data]);
    let m: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(m["recall_at"]["1"], 1.0);
    assert!(m["recall_at"]["8"].as_f64() >= m["recall_at"]["1"].as_f64());
    assert_eq!(m["nmi"], 1.0);
    assert_eq!(ok(&["eval", "--checkpoint", &ckpt, "--data", &data]), first);

    let other = path(&dir, "other.csv");
    ok(&["gen", "--classes", "4", "--per-cluster", "3", "--dim", "5", "--out", &other]);
    assert_eq!(cli(&["eval", "--checkpoint", &ckpt, "--data", &other]).status.code(), Some(1));
}

#[test]
fn analyze_centers_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(&dir, &["--epochs", "0", "--K", "20", "--dim", "16"]);
    let ckpt = run.join("checkpoint.txt").to_string_lossy().into_owned();
    let counts = |eps: &str| -> Vec<u64> {
        let v: Value = serde_json::from_str(&ok(&["analyze-centers", "--checkpoint", &ckpt, "--merge-eps", eps])).unwrap();
        v["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect()
    };
    assert!(counts("0.01").iter().all(|c| *c >= 19));
    let mut previous = counts("0.01");
    for eps in ["0.5", "1.0", "1.5", "2.1"] {
        let now = counts(eps);
        assert!(now.iter().zip(&previous).all(|(a, b)| a <= b));
        previous = now;
    }
    assert!(previous.iter().all(|c| *c == 1));

    let mut same = Checkpoint::load(Path::new(&ckpt)).unwrap();
    let row: Vec<f64> = same.centers.center(0, 0).to_vec();
    let (c, k, d) = (same.centers.classes(), same.centers.per_class(), same.centers.dim());
    same.centers = CenterBank::new(c, k, d, row.repeat(c * k)).unwrap();
    let path_same = dir.path().join("same.txt");
    same.save(&path_same).unwrap();
    let v: Value = serde_json::from_str(&ok(&["analyze-centers", "--checkpoint", &path_same.to_string_lossy()])).unwrap();
    assert!(v["counts"].as_array().unwrap().iter().all(|c| c == 1));
    assert_eq!(v["histogram"]["1"], c as u64);
}

#[test]
fn verify_reports_suites_and_catches_sign_flip() {
    let clean = cli(&["verify"]);
    assert!(clean.status.success());
    let text = String::from_utf8(clean.stdout).unwrap();
    assert!(text.lines().filter(|l| l.contains("PASS")).count() >= 4);

    let broken = cli(&["verify", "--inject-fault", "gradient-sign"]);
    assert_eq!(broken.status.code(), Some(1));
    let text = String::from_utf8(broken.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("gradient-fidelity") && l.contains("FAIL")));
    assert!(text.contains("first counterexample (gradient-fidelity)"));
}

#[test]
fn rerun_from_manifest_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(&dir, &["--eval-every", "1"]);
    let again = path(&dir, "again");
    ok(&["rerun", &run.join("manifest.json").to_string_lossy(), "--out", &again]);
    for f in ["checkpoint.txt", "metrics.jsonl"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(Path::new(&again).join(f)).unwrap());
    }

    let copy = path(&dir, "copy.csv");
    ok(&["rerun", &format!("{data}.manifest.json"), "--out", &copy]);
    assert_eq!(fs::read(&data).unwrap(), fs::read(&copy).unwrap());

    fs::write(&data, "label,f1\n0,1\n1,2\n").unwrap();
    let changed = cli(&["rerun", &run.join("manifest.json").to_string_lossy(), "--out", &again]);
    assert_eq!(changed.status.code(), Some(1));
}
