use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blockfold::io::dataset::Dataset;

fn blockfold(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockfold")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = blockfold(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn json_lines(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn toy(dir: &Path, name: &str, entity: &str, n: &str, len: (&str, &str), seed: &str) -> String {
    let p = path(dir, name);
    ok(&["gen-toy", "--entity", entity, "--molecules", n, "--min-len", len.0, "--max-len", len.1, "--seed", seed, "--out", &p]);
    p
}

#[test]
fn inspect_counts_knn_and_virtual_edges() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), "five.jsonl", "protein", "2", ("5", "5"), "3");
    let stats = json_lines(&ok(&["inspect", "--data", &data, "--k", "2", "--n-virtual", "1"]));
    assert_eq!(stats.len(), 2);
    for s in stats {
        assert_eq!(s["n"], 5);
        assert_eq!(s["knn_edges"], 10);
        assert_eq!(s["virtual_edges"], 10);
        assert_eq!(s["edges"], 20);
    }
}

#[test]
fn gen_toy_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = toy(dir.path(), "a.jsonl", "rna", "4", ("10", "20"), "9");
    let b = toy(dir.path(), "b.jsonl", "rna", "4", ("10", "20"), "9");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let first = std::fs::read_to_string(&a).unwrap();
    assert!(first.starts_with("{\"format\":\"blockfold-ds/1\""));
}

#[test]
fn train_eval_design_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let train = toy(dir.path(), "train.jsonl", "protein", "4", ("10", "16"), "1");
    let valid = toy(dir.path(), "valid.jsonl", "protein", "2", ("10", "16"), "2");
    let out = path(dir.path(), "run");
    let summary: serde_json::Value = serde_json::from_str(&ok(&[
        "train", "--train", &train, "--valid", &valid, "--out", &out, "--epochs", "2", "--layers", "1", "--hidden",
        "8", "--k", "6", "--n-virtual", "1", "--batch", "2", "--seed", "4",
    ]))
    .unwrap();
    assert_eq!(summary["epochs"], 2);
    assert_eq!(summary["steps"], 4);

    let best = PathBuf::from(&out).join("best.ckpt");
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", &valid])).unwrap();
    assert_eq!(report["median_recovery"], summary["best_valid_median"]);

    let designs = json_lines(&ok(&["design", "--checkpoint", best.to_str().unwrap(), "--data", &valid]));
    let (ds, _) = Dataset::read(Path::new(&valid)).unwrap();
    assert_eq!(designs.len(), ds.records.len());
    for (d, rec) in designs.iter().zip(&ds.records) {
        assert_eq!(d["id"].as_str().unwrap(), rec.id);
        assert_eq!(d["sequence"].as_str().unwrap().len(), rec.num_blocks());
        let probs = d["probabilities"].as_array().unwrap();
        assert_eq!(probs.len(), rec.num_blocks());
        let total: f64 = probs[0].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    // resuming a finished run to a later epoch appends to the same log
    let last = PathBuf::from(&out).join("last.ckpt");
    ok(&[
        "train", "--train", &train, "--valid", &valid, "--out", &out, "--epochs", "3", "--batch", "2", "--seed", "4",
        "--resume", last.to_str().unwrap(),
    ]);
    let log = std::fs::read_to_string(PathBuf::from(&out).join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(blockfold(&[]).status.code(), Some(2));
    assert_eq!(blockfold(&["fold"]).status.code(), Some(2));
    assert_eq!(blockfold(&["inspect"]).status.code(), Some(2));
    assert_eq!(blockfold(&["inspect", "--data", "x", "--k", "many"]).status.code(), Some(2));
    let help = blockfold(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8(help.stdout).unwrap();
    for sub in ["train", "eval", "design", "inspect", "gen-toy"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let train_help = String::from_utf8(blockfold(&["train", "--help"]).stdout).unwrap();
    for flag in [
        "--config", "--seed", "--k", "--n-virtual", "--layers", "--hidden", "--dropout", "--epochs", "--lr", "--batch",
        "--device-threads",
    ] {
        assert!(train_help.contains(flag), "{flag} missing");
    }
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = path(dir.path(), "missing.jsonl");
    let out = blockfold(&["inspect", "--data", &missing]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let empty = path(dir.path(), "empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = blockfold(&["inspect", "--data", &empty]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no records"));

    let cfg = path(dir.path(), "bad.toml");
    std::fs::write(&cfg, "[model]\nwidth = 4\n").unwrap();
    let data = toy(dir.path(), "d.jsonl", "protein", "1", ("6", "6"), "1");
    assert_eq!(blockfold(&["inspect", "--data", &data, "--config", &cfg]).status.code(), Some(1));

    // protein checkpoint against an rna dataset
    let train = toy(dir.path(), "t.jsonl", "protein", "2", ("8", "8"), "1");
    let run = path(dir.path(), "run");
    ok(&["train", "--train", &train, "--valid", &train, "--out", &run, "--epochs", "0", "--layers", "0", "--hidden", "4"]);
    let rna = toy(dir.path(), "r.jsonl", "rna", "1", ("8", "8"), "1");
    let ckpt = PathBuf::from(&run).join("best.ckpt");
    let out = blockfold(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &rna]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("entity mismatch"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), "d.jsonl", "protein", "1", ("12", "12"), "1");
    let cfg = path(dir.path(), "run.toml");
    std::fs::write(&cfg, "[model]\nk = 3\nn_virtual = 2\n").unwrap();
    let s = &json_lines(&ok(&["inspect", "--data", &data, "--config", &cfg]))[0];
    assert_eq!((s["knn_edges"].as_u64(), s["virtual_edges"].as_u64()), (Some(36), Some(48)));
    let s = &json_lines(&ok(&["inspect", "--data", &data, "--config", &cfg, "--k", "4"]))[0];
    assert_eq!(s["knn_edges"], 48);
}
