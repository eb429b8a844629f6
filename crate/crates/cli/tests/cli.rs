use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cats(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cats")).args(args).output().expect("spawn cats")
}

fn ok(args: &[&str]) -> String {
    let out = cats(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn init(dir: &TempDir, name: &str, seed: &str) -> PathBuf {
    let p = dir.path().join(name);
    ok(&["init-model", "--seed", seed, "--out", s(&p)]);
    p
}

#[test]
fn init_is_deterministic_and_describable() {
    let dir = TempDir::new().unwrap();
    let a = init(&dir, "a.bin", "7");
    let b = init(&dir, "b.bin", "7");
    let c = init(&dir, "c.bin", "8");
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert!(dir.path().join("a.bin.manifest.json").exists());

    let v: serde_json::Value = serde_json::from_str(&ok(&["describe", s(&a)])).unwrap();
    assert_eq!(v["file_bytes"], v["declared_bytes"]);
    assert_eq!(v["layout"]["config"]["n_layers"], 8);
}

#[test]
fn speculative_modes_print_autoregressive_tokens() {
    let dir = TempDir::new().unwrap();
    let w = init(&dir, "m.bin", "3");
    let base = ["generate", s(&w), "--prompt", "4,5,6,7", "--max-new-tokens", "24"];
    let ar = ok(&[&base[..], &["--mode", "autoregressive"]].concat());
    assert_eq!(ar.split_whitespace().count(), 24);
    for extra in [
        &["--mode", "cats"][..],
        &["--mode", "two-stage"],
        &["--mode", "cats", "--gamma", "1"],
        &["--mode", "cats", "--dram-budget", "1200000", "--chunk-size", "32768"],
    ] {
        assert_eq!(ok(&[&base[..], extra].concat()), ar, "{extra:?}");
    }
}

#[test]
fn stats_and_ledger_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let w = init(&dir, "m.bin", "5");
    let run = |tag: &str| {
        let stats = dir.path().join(format!("{tag}.jsonl"));
        let ledger = dir.path().join(format!("{tag}.csv"));
        let trees = dir.path().join(format!("{tag}.trees"));
        ok(&[
            "generate", s(&w), "--prompt", "1,2,3", "--max-new-tokens", "16", "--policy", "typical",
            "--temperature", "0.8", "--seed", "11", "--stats", s(&stats), "--ledger", s(&ledger),
            "--dump-trees", s(&trees), "--dram-budget", "1200000", "--chunk-size", "32768",
        ]);
        [stats, ledger, trees].map(|p| std::fs::read_to_string(p).unwrap())
    };
    let first = run("a");
    assert_eq!(first, run("b"));
    let [stats, ledger, trees] = first;
    let last: serde_json::Value = serde_json::from_str(stats.lines().last().unwrap()).unwrap();
    assert_eq!(last["tokens"].as_array().unwrap().len(), 16);
    assert!(ledger.starts_with("cycle,stage,layer_lo,layer_hi,bytes,seconds\n"));
    assert!(ledger.lines().count() > 1);
    assert_eq!(trees.lines().count(), stats.lines().count() - 1);
}

#[test]
fn bpt_preset_matches_reference_table() {
    let out = ok(&["bpt", "--paper-vicuna7b", "--l-dm", "3", "--l-sv", "16", "--gamma", "5", "--tau", "2.27"]);
    assert!(out.contains("baseline,12952535040,12.95"), "{out}");
    assert!(out.contains("two-stage,") && out.contains(",8.38"), "{out}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(cats(&["bpt", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cats(&["bpt", "--paper-vicuna7b", "--l-dm", "20", "--l-sv", "10"]).status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let w = init(&dir, "m.bin", "1");
    assert_eq!(cats(&["generate", s(&w), "--prompt", "1,zz"]).status.code(), Some(2));
    assert_eq!(cats(&["generate", s(&dir.path().join("missing")), "--prompt", "1"]).status.code(), Some(3));
}

#[test]
fn zero_step_training_keeps_weights() {
    let dir = TempDir::new().unwrap();
    let w = init(&dir, "m.bin", "2");
    let before = std::fs::read(&w).unwrap();
    ok(&["train-adapters", s(&w), "--steps", "0", "--sequences", "4"]);
    assert_eq!(std::fs::read(&w).unwrap(), before);
    let log = std::fs::read_to_string(dir.path().join("m.bin.train.csv")).unwrap();
    assert_eq!(log.trim(), "step,adapter,loss");
}

#[test]
fn config_file_sets_defaults() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[model]\nn_layers = 6\nl_dm = 1\nl_sv = 3\n").unwrap();
    let w = dir.path().join("m.bin");
    ok(&["init-model", "--config", s(&cfg), "--out", s(&w)]);
    let v: serde_json::Value = serde_json::from_str(&ok(&["describe", s(&w)])).unwrap();
    assert_eq!(v["layout"]["config"]["n_layers"], 6);

    std::fs::write(&cfg, "[model]\nlayers = 6\n").unwrap();
    assert_eq!(cats(&["init-model", "--config", s(&cfg), "--out", s(&w)]).status.code(), Some(2));
}

#[test]
fn sweep_writes_header_and_rows() {
    let dir = TempDir::new().unwrap();
    let w = init(&dir, "m.bin", "4");
    let out = dir.path().join("sweep.csv");
    ok(&[
        "sweep", s(&w), "--budgets", "1000,100000000", "--gammas", "2", "--prompts", "1",
        "--max-new-tokens", "8", "--out", s(&out),
    ]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("point,budget_bytes,mode,l_dm,l_sv,gamma,bpt,comp_per_tok_s,mean_acc,tok_per_s,speedup,status")
    );
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].ends_with("infeasible: ") || rows[0].contains("infeasible"));
    assert!(rows[3].ends_with(",ok"));
    assert!(dir.path().join("sweep.csv.manifest.json").exists());
}
