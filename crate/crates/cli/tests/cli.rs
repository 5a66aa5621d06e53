use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use dral_core::data::Dataset;
use dral_core::experiment::{parse_metrics_csv, ComparisonTable, ScatterExport};

const SMALL: &str = r#"{
  "dataset": {"blobs": {"samples_per_class": 100}},
  "seed_labeled_size": 20, "validation_size": 60, "test_size": 60,
  "round_budget": 10, "global_budget": 40,
  "learner": {"epochs_full": 8, "epochs_finetune": 2},
  "agent": {"min_fill_for_sampling": 8, "sample_batch": 4}
}"#;

fn dral(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dral")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn drop_wall(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn run_writes_csv_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = dral(&["run", "--config", s(&cfg), "--strategy", "margin", "--seed", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (std::fs::read_to_string(a).unwrap(), std::fs::read_to_string(b).unwrap());
    assert_eq!(drop_wall(&a), drop_wall(&b));
    let logs = parse_metrics_csv(&a).unwrap();
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0].seed, 3);
    assert_eq!(logs[0].rows.last().unwrap().cumulative_labels, 60);
}

#[test]
fn run_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = dral(&["run", "--config", s(&cfg), "--budget", "20", "--round-budget", "5"]);
    assert!(o.status.success());
    let logs = parse_metrics_csv(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let labels: Vec<usize> = logs[0].rows.iter().map(|r| r.cumulative_labels).collect();
    assert_eq!(labels, [20, 25, 30, 35, 40]);
}

#[test]
fn dral_run_writes_scatter_and_agent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (scatter, agent) = (dir.path().join("s.json"), dir.path().join("agent.json"));
    let o = dral(&[
        "run",
        "--config",
        s(&cfg),
        "--strategy",
        "dral",
        "--out",
        s(&dir.path().join("m.csv")),
        "--scatter-out",
        s(&scatter),
        "--agent-out",
        s(&agent),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sc: ScatterExport = serde_json::from_str(&std::fs::read_to_string(scatter).unwrap()).unwrap();
    assert_eq!(sc.seed_points.len(), 20);
    assert!(sc.rounds.iter().all(|r| r.points.len() <= 10));
    let cp: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(agent).unwrap()).unwrap();
    assert!(cp["actor"].is_object());
}

#[test]
fn compare_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (out, runs) = (dir.path().join("t.csv"), dir.path().join("runs.csv"));
    let o = dral(&[
        "compare",
        "--config",
        s(&cfg),
        "--strategies",
        "random,margin",
        "--seeds",
        "4,9",
        "--out",
        s(&out),
        "--runs-out",
        s(&runs),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = ComparisonTable::from_csv(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 10);
    assert!(table.rows.iter().all(|r| r.n_seeds == 2));
    let logs = parse_metrics_csv(&std::fs::read_to_string(runs).unwrap()).unwrap();
    let keys: Vec<(String, u64)> = logs.iter().map(|l| (l.strategy.to_string(), l.seed)).collect();
    assert_eq!(keys, [("random".into(), 4), ("random".into(), 9), ("margin".into(), 4), ("margin".into(), 9)]);
}

#[test]
fn generate_data_honors_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("d.json");
    assert!(dral(&["generate-data", "--config", s(&cfg), "--seed", "7", "--out", s(&out)]).status.success());
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.len(), 400);
    assert_eq!(ds.meta.seed, 7);
    let again = dral(&["generate-data", "--config", s(&cfg), "--seed", "7"]);
    assert_eq!(Dataset::from_json(&String::from_utf8(again.stdout).unwrap()).unwrap(), ds);
}

#[test]
fn grad_check_passes() {
    let o = dral(&["grad-check"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("max relative error (layers)"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn exit_codes() {
    assert_eq!(dral(&["--help"]).status.code(), Some(0));
    assert_eq!(dral(&["run", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dral(&["run", "--strategy", "psychic"]).status.code(), Some(1));
    assert_eq!(dral(&["frobnicate"]).status.code(), Some(1));
    let o = dral(&["run", "--config", "/nonexistent/c.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/c.json"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(dral(&["run", "--config", s(&cfg), "--round-budget", "0"]).status.code(), Some(2));
    let deferred = dir.path().join("deferred.json");
    std::fs::write(&deferred, r#"{"oracle": "deferred"}"#).unwrap();
    assert_eq!(dral(&["run", "--config", s(&deferred)]).status.code(), Some(2));
    let out = dir.path().join("no-such-dir").join("m.csv");
    assert_eq!(dral(&["run", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(dral(&["compare", "--config", s(&cfg), "--seeds", "zero"]).status.code(), Some(2));
}

fn http_get(addr: &str, path: &str) -> String {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).unwrap();
    reply
}

#[test]
fn serve_starts_a_session() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let info = dir.path().join("info.json");
    let mut child = Command::new(env!("CARGO_BIN_EXE_dral"))
        .args(["serve", "--config", s(&cfg), "--port", "0", "--out", s(&info)])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    while !info.exists() {
        assert!(Instant::now() < deadline, "serve never wrote its address");
        std::thread::sleep(Duration::from_millis(20));
    }
    let info: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&info).unwrap()).unwrap();
    let addr = info["address"].as_str().unwrap();
    let id = info["session"].as_u64().unwrap();
    let reply = http_get(addr, &format!("/sessions/{id}/pending"));
    let missing = http_get(addr, "/sessions/999/pending");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"num_classes\":4"));
    assert!(missing.starts_with("HTTP/1.1 404"));
}
