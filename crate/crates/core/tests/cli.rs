//! The command-line pipeline on the checked-in fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini_corpus/halu.toml")
}

fn run(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halu-forge"))
        .args(args)
        .env("HALU_RUN_DIR", run_dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(run_dir: &Path, args: &[&str]) -> String {
    let out = run(run_dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn mock_pipeline_is_deterministic() {
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["all", "--config", cfg, "--mock"]);
    ok(b.path(), &["all", "--config", cfg, "--mock"]);
    for f in ["metrics.json", "rounds.json", "reports.jsonl", "round-0/train.jsonl", "train_config.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let md = std::fs::read_to_string(a.path().join("metrics.md")).unwrap();
    assert!(md.contains("| mock-a | CO-STAR |"));
}

#[test]
fn stage_rerun_reproduces_artifact() {
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["all", "--config", cfg]);
    for (stage, artifact) in [("evaluate", "metrics.json"), ("select", "rounds.json"), ("generate", "reports.jsonl")] {
        let before = std::fs::read(dir.path().join(artifact)).unwrap();
        std::fs::remove_file(dir.path().join(artifact)).unwrap();
        ok(dir.path(), &[stage, "--config", cfg]);
        assert_eq!(before, std::fs::read(dir.path().join(artifact)).unwrap(), "{stage}");
    }
}

#[test]
fn generate_without_prompts_is_refused() {
    let cfg = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["generate", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("needs prompts.jsonl"), "{err}");
}

#[test]
fn flags_override_the_file() {
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["all", "--config", cfg, "--rounds", "2", "--p", "0.75", "--seed", "3", "--prompt", "ro", "--report-filter", "mock-b"]);
    let rounds: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("rounds.json")).unwrap()).unwrap();
    let rounds = rounds.as_array().unwrap();
    assert_eq!(rounds.len(), 2);
    assert_eq!(rounds[1]["seed"], 4);
    assert_eq!(rounds[0]["selected_ids"].as_array().unwrap().len(), 9);
    let md = std::fs::read_to_string(dir.path().join("metrics.md")).unwrap();
    assert!(md.contains("| mock-b | RO |") && !md.contains("mock-a"));
}

#[test]
fn pair_lock_keeps_pairs_together() {
    let cfg = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["all", "--config", cfg.to_str().unwrap(), "--pair-lock"]);
    let rounds: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("rounds.json")).unwrap()).unwrap();
    for r in rounds.as_array().unwrap() {
        let sel: Vec<&str> = r["selected_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        for id in &sel {
            let cve = id.rsplit_once(':').unwrap().0;
            assert!(sel.contains(&format!("{cve}:vuln").as_str()) && sel.contains(&format!("{cve}:fixed").as_str()));
        }
    }
}

#[test]
fn census_on_shipped_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("census.toml");
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    std::fs::write(&cfg, format!("corpus_dir = {:?}\nrun_dir = \"run\"\nmock_mode = true\n", data)).unwrap();
    let out = ok(&dir.path().join("run"), &["census", "--config", cfg.to_str().unwrap()]);
    for line in ["records: 81", "samples: 162", "CWEs: 44", "programs: 54", "CWE-416=9"] {
        assert!(out.contains(line), "missing {line:?} in\n{out}");
    }
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "corpus_dir = \".\"\nrun_dir = \"r\"\nmock_mode = true\np = 1.5\n").unwrap();
    let out = run(dir.path(), &["census", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config field `p`"));
}
