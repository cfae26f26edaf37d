use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use wflab::model::{load_model, FreezeMask};

fn wflab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wflab"))
        .args(args)
        .env_remove("WFLAB_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wflab(args);
    assert!(
        out.status.success(),
        "wflab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    wflab(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Sorted (relative path, bytes) of every file under `dir`.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// 3 sites x 2 envs, 4 traces of 3,000 packets each.
fn small_corpus(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("corpus");
    ok(&["synth", "--out", s(&dir), "--seed", "4", "--sites", "3", "--envs", "2", "--packets", "3000"]);
    dir
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_default_cardinality_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["synth", "--out", s(&a), "--seed", "9", "--packets", "600", "--jobs", "1"]);
    let wfds = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wfds")).count();
    assert_eq!(wfds, 20 * 8);
    assert!(a.join("manifest.json").exists());
    assert_eq!(fs::read_dir(a.join("traces")).unwrap().count(), 20 * 8 * 4);

    ok(&["synth", "--out", s(&b), "--seed", "9", "--packets", "600"]);
    assert_eq!(snapshot(&a), snapshot(&b));
    ok(&["synth", "--out", s(&c), "--seed", "10", "--packets", "600"]);
    assert_ne!(snapshot(&a), snapshot(&c));
}

#[test]
fn seed_precedence_is_flag_then_file_then_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 5\n[synth]\nsites = 2\nenvs = 1\npackets_per_trace = 600\n").unwrap();
    let resolved = |dir: &Path| -> toml::Value { toml::from_str(&fs::read_to_string(dir.join("resolved.toml")).unwrap()).unwrap() };
    let seed = |dir: &Path| resolved(dir)["seed"].as_integer().unwrap();

    let d1 = tmp.path().join("d1");
    ok(&["synth", "--config", s(&cfg), "--out", s(&d1), "--seed", "6"]);
    assert_eq!(seed(&d1), 6);
    let d2 = tmp.path().join("d2");
    ok(&["synth", "--config", s(&cfg), "--out", s(&d2)]);
    assert_eq!(seed(&d2), 5);
    let d3 = tmp.path().join("d3");
    let out = Command::new(env!("CARGO_BIN_EXE_wflab"))
        .args(["synth", "--out", s(&d3), "--sites", "2", "--envs", "1", "--packets", "600"])
        .env("WFLAB_SEED", "12")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(seed(&d3), 12);
    assert_eq!(resolved(&d3)["synth"]["sites"].as_integer(), Some(2));
}

#[test]
fn train_then_eval_reports_the_same_test_accuracy() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(&tmp);
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--epochs", "2", "--batch-size", "16", "--seed", "3"]);
    let history = json(&run.join("history.json"));
    assert_eq!(history["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(history["final"]["split"], "test");

    let ev = tmp.path().join("eval");
    let model = run.join("model.wfck");
    let stdout = ok(&["eval", "--data", s(&data), "--model", s(&model), "--out", s(&ev)]);
    assert!(stdout.contains("precision"));
    let report = json(&ev.join("eval.json"));
    assert_eq!(report["accuracy"], history["final"]["accuracy"]);
    assert_eq!(report["total"], history["final"]["samples"]);
    let lines = fs::read_to_string(ev.join("results.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
}

#[test]
fn zero_lambda_adaptation_predicts_like_plain_training() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(&tmp);
    let (plain, adv) = (tmp.path().join("plain"), tmp.path().join("adv"));
    let common = ["--data", s(&data), "--epochs", "2", "--batch-size", "16", "--seed", "8"];
    let mut a = vec!["train", "--out", s(&plain), "--envs", "0"];
    a.extend(common);
    ok(&a);
    let mut b = vec!["adapt", "--out", s(&adv), "--source-envs", "0", "--target-env", "1", "--lambda-d", "0"];
    b.extend(common);
    ok(&b);
    let (pe, ae) = (tmp.path().join("pe"), tmp.path().join("ae"));
    for (model, out) in [(plain.join("model.wfck"), &pe), (adv.join("model.wfck"), &ae)] {
        ok(&["eval", "--data", s(&data), "--envs", "0,1", "--split", "all", "--model", s(&model), "--out", s(out)]);
    }
    assert_eq!(json(&pe.join("eval.json")), json(&ae.join("eval.json")));
}

#[test]
fn conv_freeze_leaves_kernels_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(&tmp);
    let (pre, tuned) = (tmp.path().join("pre"), tmp.path().join("tuned"));
    ok(&["train", "--data", s(&data), "--out", s(&pre), "--envs", "0", "--epochs", "2", "--batch-size", "16"]);
    let pre_model = pre.join("model.wfck");
    ok(&[
        "finetune", "--data", s(&data), "--out", s(&tuned), "--envs", "1", "--model", s(&pre_model), "--freeze", "conv",
        "--per-class", "8", "--epochs", "2", "--batch-size", "8",
    ]);
    let a = load_model(&pre_model).unwrap();
    let b = load_model(tuned.join("model.wfck")).unwrap();
    let mask = FreezeMask::conv_layers(&a);
    assert!(!mask.is_empty());
    let mut moved = false;
    for (p, q) in a.net.params().zip(b.net.params()) {
        let same = p.tensor.values().iter().zip(q.tensor.values()).all(|(x, y)| x.to_bits() == y.to_bits());
        if mask.contains(&p.name) {
            assert!(same, "{} changed", p.name);
        } else {
            moved |= !same;
        }
    }
    assert!(moved);
}

#[test]
fn empty_injection_changes_nothing_but_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(&tmp);
    let out = tmp.path().join("defended");
    let stdout = ok(&["defend", "--data", s(&data), "--out", s(&out), "--kind", "injection", "--k", "0"]);
    assert!(stdout.contains("packets +0.0000"));
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        v.into_iter().filter(|(p, _)| p != Path::new("manifest.json") && p != Path::new("resolved.toml") && p != Path::new("synth.toml")).collect()
    };
    assert_eq!(strip(snapshot(&data)), strip(snapshot(&out)));
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["defense"]["overhead"]["packet_overhead"], 0.0);

    let test_only = tmp.path().join("test-only");
    ok(&["defend", "--data", s(&data), "--out", s(&test_only), "--kind", "inflation", "--a", "20", "--mode", "test-only"]);
    let after: std::collections::BTreeMap<PathBuf, Vec<u8>> = snapshot(&test_only).into_iter().collect();
    let changed: Vec<PathBuf> = snapshot(&data)
        .into_iter()
        .filter(|(p, bytes)| p.starts_with("traces") && after.get(p) != Some(bytes))
        .map(|(p, _)| p)
        .collect();
    assert_eq!(changed.len(), 3 * 2);
    assert!(changed.iter().all(|p| p.to_str().unwrap().ends_with("_t003.csv")));
}

#[test]
fn report_on_an_empty_results_file_prints_a_header() {
    let tmp = TempDir::new().unwrap();
    let results = tmp.path().join("results.jsonl");
    fs::write(&results, "").unwrap();
    let stdout = ok(&["report", "--results", s(&results)]);
    assert!(stdout.contains("experiment"));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(&tmp);
    let out = tmp.path().join("o");
    let missing = tmp.path().join("missing");
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&out)]), 3);
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&out), "--batch-size", "1"]), 2);

    let bad_cfg = tmp.path().join("bad.toml");
    fs::write(&bad_cfg, "[train]\nepoch = 3\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad_cfg), "--data", s(&data), "--out", s(&out)]), 2);

    let wfds = fs::read_dir(&data).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|x| x == "wfds")).unwrap();
    let mut bytes = fs::read(&wfds).unwrap();
    bytes[0] = b'X';
    fs::write(&wfds, bytes).unwrap();
    let out = wflab(&["train", "--data", s(&data), "--out", s(&tmp.path().join("p")), "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}
