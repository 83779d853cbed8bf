use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn demo_copy() -> tempfile::TempDir {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo");
    let dst = tempfile::tempdir().unwrap();
    copy_dir(&src, dst.path());
    dst
}

fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name();
        if name == "workspace" || name == "out" {
            continue;
        }
        let target = dst.join(&name);
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_extractkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn run_dir(dir: &Path, id: &str) -> PathBuf {
    dir.join("workspace/runs").join(id)
}

#[test]
fn extract_on_demo_populates_run_dir() {
    let d = demo_copy();
    let out = run(d.path(), &["extract", "--config", "demo.cfg", "--run-id", "smoke"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let rd = run_dir(d.path(), "smoke");
    for f in ["records.jsonl", "failures.jsonl", "ledger.json", "manifest.json", "audit.log", "config.snapshot", "schema.snapshot"] {
        assert!(rd.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(rd.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["overrides"]["run_id"], "smoke");
}

#[test]
fn dry_run_sends_nothing() {
    let d = demo_copy();
    let out = run(d.path(), &["extract", "--config", "demo.cfg", "--dry-run"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("50 total, 50 kept"));
    assert!(!d.path().join("workspace/runs").exists());
}

#[test]
fn unknown_flag_exits_1_with_usage() {
    let d = demo_copy();
    let out = run(d.path(), &["extract", "--config", "demo.cfg", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("Usage"));
    let out = run(d.path(), &["extract", "--config", "missing.cfg"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn budget_halt_exits_3_and_resumes() {
    let d = demo_copy();
    let out = run(d.path(), &["extract", "--config", "demo.cfg", "--run-id", "tight", "--budget", "0.0005"]);
    assert_eq!(out.status.code(), Some(3));
    let err = text(&out.stderr);
    let snapshot = run_dir(d.path(), "tight").join("config.snapshot");
    assert!(err.contains("checkpoint: "), "{err}");
    assert!(err.contains(&format!("extractkit resume --config {}", snapshot.display())), "{err}");
    let out = run(d.path(), &["resume", "--config", snapshot.to_str().unwrap(), "--budget", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
}

#[test]
fn experiments_and_exports_have_expected_shapes() {
    let d = demo_copy();
    let out = run(
        d.path(),
        &["pareto", "--config", "demo.cfg", "--keywords", "keywords.txt", "--field", "good", "--out", "out/frontier.csv", "--svg", "out/frontier.svg"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = fs::read_to_string(d.path().join("out/frontier.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(fs::read_to_string(d.path().join("out/frontier.svg")).unwrap().contains("Normalized cost"));
    let manifest = fs::read_to_string(d.path().join("out/frontier.manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"complete\""));

    let out = run(
        d.path(),
        &["lilpro", "--config", "lilpro.cfg", "--field", "price_expectation", "--p0", "p0.txt", "--meta", "meta.txt", "-B", "8", "-T", "20", "-k", "3", "--seed", "7", "--out", "out/traj.jsonl"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let out = run(d.path(), &["export", "trajectory", "--from", "out/traj.jsonl", "--out", "out/traj.csv"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(d.path().join("out/traj.csv")).unwrap();
    assert!(csv.starts_with("batch,batch_score,presence_precision,error_count\n"));
    assert_eq!(csv.lines().count(), 21);
    let out = run(
        d.path(),
        &["lilpro", "--config", "lilpro.cfg", "--field", "price_expectation", "--p0", "p0.txt", "-B", "8", "-T", "6", "--holdout", "0.25", "--out", "out/held.jsonl"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let held: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("out/held.holdout.json")).unwrap()).unwrap();
    assert!(held["items"].as_u64().unwrap() > 0);
    assert!(held["chosen"].as_f64().unwrap() >= held["p0"].as_f64().unwrap());
    let out = run(d.path(), &["export", "frontier", "--from", "out/missing.json", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_and_cache_commands() {
    let d = demo_copy();
    assert_eq!(run(d.path(), &["extract", "--config", "demo.cfg"]).status.code(), Some(0));
    let out = run(d.path(), &["evaluate", "--config", "demo.cfg", "--field", "good", "--metric", "presence", "--json", "out/eval.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("presence"));
    let out = run(d.path(), &["cache", "stats", "--config", "demo.cfg"]);
    assert!(text(&out.stdout).contains("entries  50"));
    let out = run(d.path(), &["cache", "prune", "--config", "demo.cfg", "--before", "2999-01-01"]);
    assert!(text(&out.stdout).contains("removed 50"));
    let out = run(d.path(), &["cache", "prune", "--config", "demo.cfg", "--before", "yesterday"]);
    assert_eq!(out.status.code(), Some(1));
}
