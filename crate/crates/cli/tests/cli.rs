use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recall-lens"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Tiny world plus a small model that answers every query.
fn trained(dir: &Path) {
    let gen = run(&["gen-world", "--out", "w", "--subjects", "6", "--relations", "1", "--objects-per-relation", "8"], dir);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let train = run(
        &[
            "train", "--world", "w", "--out", "m", "--layers", "2", "--heads", "2", "--d-head", "8", "--d-mlp", "32",
            "--steps", "400", "--lr", "1e-2", "--batch-size", "16", "--eval-every", "100",
        ],
        dir,
    );
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
}

#[test]
fn gen_world_is_deterministic() {
    let dir = TempDir::new().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&run(&["gen-world", "--out", out, "--subjects", "5"], dir.path())), 0);
    }
    for f in ["world.jsonl", "vocab.txt"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn train_eval_analyze_report() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    trained(d);
    for f in ["weights.bin", "weights.toml", "optimizer.bin", "train_log.csv"] {
        assert!(d.join("m").join(f).exists(), "missing {f}");
    }

    let eval = run(&["eval", "--world", "w", "--weights", "m/weights.bin", "--out", "inst.jsonl"], d);
    assert_eq!(code(&eval), 0);
    let summary: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(summary["total"], 6);
    assert_eq!(fs::read_to_string(d.join("inst.jsonl")).unwrap().lines().count(), 6);

    for out in ["a", "b"] {
        let a = run(&["analyze", "--world", "w", "--weights", "m/weights.bin", "--out", out], d);
        assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    }
    let mut names: Vec<String> = fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(names.contains(&"heads.csv".to_string()) && names.contains(&"tracing_subject.csv".to_string()));
    for n in &names {
        assert_eq!(fs::read(d.join("a").join(n)).unwrap(), fs::read(d.join("b").join(n)).unwrap(), "{n} differs");
    }

    let series = fs::read_to_string(d.join("a/logit_lens.csv")).unwrap();
    assert_eq!(series.lines().next().unwrap(), "analysis,instance,step,layer,token_role,token_id,value_kind,value");
    // 2 components × 3 steps × 2 layers × 4 tracked tokens, per instance plus the mean rows.
    assert_eq!(series.lines().count() - 1, 48 * 7);
    let heads = fs::read_to_string(d.join("a/heads.csv")).unwrap();
    assert_eq!(heads.lines().next().unwrap(), "layer,head,step,promotion_rate,suppression_rate,n_instances");
    assert_eq!(heads.lines().count() - 1, 2 * 2 * 3);

    let report = run(&["report", "--dir", "a"], d);
    assert_eq!(code(&report), 0);
    assert!(String::from_utf8_lossy(&report.stdout).contains("cohort 6"));
}

#[test]
fn single_suite_and_config_overrides() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    trained(d);
    fs::write(d.join("cfg.toml"), "workers = 1\n\n[analyze]\nsuite = [\"heads\"]\npooled-stats = true\n").unwrap();
    let a = run(
        &["--config", "cfg.toml", "analyze", "--world", "w", "--weights", "m/weights.bin", "--out", "o", "--suite", "all"],
        d,
    );
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let mut names: Vec<String> =
        fs::read_dir(d.join("o")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["heads.csv", "summary.json"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("o/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stats_mode"], "pooled");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(&["gen-world", "--out", "w", "--subjects", "4", "--relations", "1"], d)), 0);

    fs::write(d.join("bad.toml"), "[train]\nbogus = 1\n").unwrap();
    assert_eq!(code(&run(&["--config", "bad.toml", "train", "--world", "w", "--out", "m"], d)), 2);
    assert_eq!(code(&run(&["train", "--world", "w", "--out", "m", "--heads", "3", "--d-head", "5"], d)), 2);
    assert_eq!(code(&run(&["no-such-command"], d)), 2);

    let untrained = run(&["train", "--world", "w", "--out", "m", "--layers", "1", "--steps", "0", "--eval-every", "0"], d);
    assert_eq!(code(&untrained), 0);
    let empty = run(&["analyze", "--world", "w", "--weights", "m/weights.bin", "--out", "o"], d);
    assert_eq!(code(&empty), 3);
    assert!(String::from_utf8_lossy(&empty.stderr).contains("empty cohort"));
    let bad_agg = run(&["analyze", "--world", "w", "--weights", "m/weights.bin", "--out", "o", "--aggregation", "mode"], d);
    assert_eq!(code(&bad_agg), 2);

    let diverge = run(&["train", "--world", "w", "--out", "x", "--layers", "1", "--steps", "30", "--lr", "1e30", "--eval-every", "0"], d);
    assert_eq!(code(&diverge), 4, "{}", String::from_utf8_lossy(&diverge.stderr));
    assert_eq!(code(&run(&["report", "--dir", "missing"], d)), 1);
}
