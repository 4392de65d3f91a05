use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn radt_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radt-lab"))
        .args(args)
        .env_remove("RADT_LAB_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = radt_lab(args);
    assert!(
        out.status.success(),
        "radt-lab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&read(path)).expect("valid JSON")
}

/// CSV rows after the provenance comment and the header.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    read(path)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const TINY: &str = "\
[run]
env = linewalk
dataset = data/dataset.jsonl
out = run
seed = 3

[model]
arch = full
n_layers = 1
d_model = 16
context_length = 4

[train]
steps = 30
batch_size = 8
warmup_steps = 5
eval_every = 10
";

/// Temp dir with a 40-trajectory linewalk dataset and a tiny config.
fn workspace() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--env", "linewalk", "--n-traj", "40", "--seed", "1", "--out", p(&dir.path().join("data"))]);
    let cfg = dir.path().join("tiny.ini");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn trained() -> (TempDir, PathBuf) {
    let (dir, cfg) = workspace();
    ok(&["train", "--config", p(&cfg)]);
    (dir, cfg)
}

#[test]
fn gen_data_writes_dataset_and_stats_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--env", "linewalk", "--n-traj", "200", "--seed", "1", "--out", p(&a)]);
    ok(&["gen-data", "--env", "linewalk", "--n-traj", "200", "--seed", "1", "--out", p(&b)]);
    let text = read(&a.join("dataset.jsonl"));
    assert_eq!(text.lines().count(), 201);
    assert_eq!(text, read(&b.join("dataset.jsonl")));
    assert_eq!(read(&a.join("stats.json")), read(&b.join("stats.json")));
    let stats = json(&a.join("stats.json"));
    assert_eq!(stats["stats"]["n_traj"], 200);
    assert_eq!(stats["stats"]["histogram"].as_array().unwrap().len(), 10);
    assert_eq!(stats["provenance"]["seeds"][0], 1);
    let q05 = stats["stats"]["q05"].as_f64().unwrap();
    let q95 = stats["stats"]["q95"].as_f64().unwrap();
    assert!(q05 < q95);
}

#[test]
fn seed_env_var_is_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--env", "delaychain", "--n-traj", "30", "--seed", "9", "--out", p(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_radt-lab"))
        .args(["gen-data", "--env", "delaychain", "--n-traj", "30", "--out", p(&b)])
        .env("RADT_LAB_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(&a.join("dataset.jsonl")), read(&b.join("dataset.jsonl")));
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = radt_lab(&["gen-data", "--env", "moonwalk", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("moonwalk") && err.contains("--help"), "{err}");

    let out = radt_lab(&["gen-data", "--env", "linewalk", "--n-traj", "1", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "single trajectory cannot cover the return range");

    let out = radt_lab(&["eval", "--checkpoint", p(&dir.path().join("missing.bin")), "--dataset", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[run]\nenv = linewalk\n\n[train]\nsteps = lots\n").unwrap();
    let out = radt_lab(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 5") && err.contains("train.steps"), "{err}");

    std::fs::write(&cfg, "[run]\nenv = linewalk\ndataset = nowhere.jsonl\n").unwrap();
    let out = radt_lab(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));
}

#[test]
fn train_writes_checkpoints_metrics_and_summary() {
    let (dir, _) = trained();
    let run = dir.path().join("run");
    for f in ["checkpoint.bin", "checkpoint-step-10.bin", "checkpoint-step-20.bin", "metrics.csv", "summary.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = read(&run.join("metrics.csv"));
    assert!(metrics.starts_with("# radt-lab "));
    assert!(metrics.lines().nth(1).unwrap() == "step,lr,loss,grad_norm");
    assert_eq!(csv_rows(&run.join("metrics.csv")).len(), 30);
    let summary = json(&run.join("summary.json"));
    assert_eq!(summary["steps"], 30);
    assert_eq!(summary["arch"], "full");
    assert!(summary["model"]["parameter_count"].as_u64().unwrap() > 0);
}

#[test]
fn eval_round_trip_reports_seven_targets_with_stderr() {
    let (dir, cfg) = trained();
    let run = dir.path().join("run");
    let ds = dir.path().join("data/dataset.jsonl");
    let out_dir = dir.path().join("eval");
    let ck = run.join("checkpoint.bin");
    let args = [
        "eval",
        "--checkpoint",
        p(&ck),
        "--dataset",
        p(&ds),
        "--episodes",
        "2",
        "--seeds",
        "1,2,3",
        "--config",
        p(&cfg),
        "--out",
        p(&out_dir),
    ];
    ok(&args);
    let summary = json(&out_dir.join("summary.json"));
    let per_target = summary["per_target"].as_array().unwrap();
    assert_eq!(per_target.len(), 7);
    assert!(per_target.iter().all(|t| t["stderr"].as_f64().unwrap() > 0.0));
    assert_eq!(summary["per_seed"].as_array().unwrap().len(), 3);
    assert_eq!(per_target[0]["normalized_target"].as_f64().unwrap().round(), 0.0);
    let rows = csv_rows(&out_dir.join("alignment.csv"));
    assert_eq!(rows.len(), 7 * 3 * 2);
    assert!(rows.iter().all(|r| r[0] == "full"));
    for svg in ["traces.svg", "errors.svg"] {
        roxmltree::Document::parse(&read(&out_dir.join(svg))).expect("well-formed SVG");
    }
}

#[test]
fn integrity_failures_exit_3() {
    let (dir, cfg) = trained();
    let run = dir.path().join("run");
    let ds = dir.path().join("data/dataset.jsonl");
    let other = dir.path().join("other.ini");
    std::fs::write(&other, read(&cfg).replace("seed = 3", "seed = 4")).unwrap();
    let out = radt_lab(&[
        "eval",
        "--checkpoint",
        p(&run.join("checkpoint.bin")),
        "--dataset",
        p(&ds),
        "--episodes",
        "1",
        "--config",
        p(&other),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let mut bytes = std::fs::read(run.join("checkpoint.bin")).unwrap();
    // The config text follows magic (8), version (4), digest (32) and length (4).
    bytes[8 + 4 + 32 + 4 + 2] ^= 1;
    let tampered = dir.path().join("tampered.bin");
    std::fs::write(&tampered, bytes).unwrap();
    let out = radt_lab(&["eval", "--checkpoint", p(&tampered), "--dataset", p(&ds), "--episodes", "1"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn probes_emit_csv_and_svg() {
    let (dir, _) = trained();
    let run = dir.path().join("run");
    let ck = run.join("checkpoint.bin");
    let ds = dir.path().join("data/dataset.jsonl");
    ok(&["probe", "--checkpoint", p(&ck), "--mode", "rtg-trace", "--dataset", p(&ds), "--episodes", "2"]);
    let rows = csv_rows(&run.join("rtg_trace.csv"));
    let mut seen = Vec::new();
    for r in &rows {
        if !seen.contains(&r[0]) {
            assert_eq!(r[1], "0");
            assert_eq!(r[0], r[2], "first trace value equals the target");
            seen.push(r[0].clone());
        }
    }
    assert_eq!(seen.len(), 7);
    roxmltree::Document::parse(&read(&run.join("traces.svg"))).unwrap();

    ok(&["probe", "--checkpoint", p(&ck), "--mode", "attention", "--dataset", p(&ds), "--episodes", "1"]);
    let rows = csv_rows(&run.join("attention.csv"));
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r[2] == "1"));
    roxmltree::Document::parse(&read(&run.join("attention.svg"))).unwrap();
}

#[test]
fn attention_probe_on_a_model_without_seqra_exits_2() {
    let (dir, cfg) = workspace();
    std::fs::write(&cfg, TINY.replace("arch = full", "arch = no-seqra")).unwrap();
    ok(&["train", "--config", p(&cfg)]);
    let out = radt_lab(&[
        "probe",
        "--checkpoint",
        p(&dir.path().join("run/checkpoint.bin")),
        "--mode",
        "attention",
        "--dataset",
        p(&dir.path().join("data/dataset.jsonl")),
        "--episodes",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

const MULTI: &str = "\
[run]
env = linewalk, delaychain
out = ablate
seed = 5
n_traj = 40

[model]
n_layers = 1
d_model = 8
context_length = 3

[train]
steps = 8
batch_size = 4
warmup_steps = 2

[eval]
episodes = 1
seeds = 0,1
";

#[test]
fn ablate_tabulates_variants_by_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("multi.ini");
    std::fs::write(&cfg, MULTI).unwrap();
    ok(&["ablate", "--config", p(&cfg), "--variants", "full,no-stepra,dt", "--jobs", "2"]);
    let out = dir.path().join("ablate");
    let table = read(&out.join("ablation.csv"));
    let lines: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines[0], "variant,linewalk,delaychain");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3], "dt,1.0000,1.0000");
    for env in ["linewalk", "delaychain"] {
        assert!(out.join(env).join("dataset.jsonl").exists());
        assert!(out.join(env).join("full/seed-1/checkpoint.bin").exists());
        assert!(out.join(env).join("alignment.csv").exists());
        roxmltree::Document::parse(&read(&out.join(env).join("traces.svg"))).unwrap();
    }
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["table"]["failures"].as_array().unwrap().len(), 0);
    assert_eq!(summary["reports"].as_array().unwrap().len(), 6);
}

#[test]
fn ablate_with_a_failed_run_exits_4_and_flags_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one.ini");
    std::fs::write(&cfg, MULTI.replace("linewalk, delaychain", "delaychain")).unwrap();
    // A file where a run directory belongs makes that run fail.
    let blocked = dir.path().join("ablate/delaychain/full");
    std::fs::create_dir_all(&blocked).unwrap();
    std::fs::write(blocked.join("seed-1"), "").unwrap();
    let out = radt_lab(&["ablate", "--config", p(&cfg), "--variants", "full,dt"]);
    assert_eq!(out.status.code(), Some(4));
    let table = read(&dir.path().join("ablate/ablation.csv"));
    assert!(table.contains("full,") && table.lines().any(|l| l.starts_with("full,") && l.ends_with('*')));
    let summary = json(&dir.path().join("ablate/summary.json"));
    assert_eq!(summary["table"]["failures"].as_array().unwrap().len(), 1);
}
