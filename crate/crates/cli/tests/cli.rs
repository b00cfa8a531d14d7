use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ptr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptr")).args(args).output().expect("spawn ptr")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn write_lines(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn toy_queries(path: &Path, n: usize) {
    let rows: Vec<Value> = (0..n)
        .map(|i| json!({"id": format!("q{i}"), "text": format!("question {i} about widget{i} and part{}", i * 7)}))
        .collect();
    write_lines(path, &rows);
}

fn toy_config(dir: &Path, n: usize, kappa: f64, delta: f64) -> PathBuf {
    toy_queries(&dir.join("queries.jsonl"), n);
    let cfg = json!({
        "seed": 11,
        "endpoints": {
            "weak": [{"role": "weak", "base_url": "mock:1", "model_name": "w"}],
            "strong": {"role": "strong", "base_url": "mock:2", "model_name": "s"},
            "embed": {"role": "embed", "base_url": "mock:3", "model_name": "e"}
        },
        "consistency": {"kappa": kappa, "delta": delta},
        "corpus": {"sft_ratio": 0.0},
        "paths": {"input": "queries.jsonl", "output_dir": "out"}
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn build_with_kappa_zero_keeps_all_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 100, 0.0, 0.5);
    let out = ptr(&["build", "--config", s(&cfg), "--jobs", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let counts: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(counts["kept"], 100);
    assert_eq!(counts["train_examples"], 100);
    assert_eq!(read_lines(&dir.path().join("out/train.jsonl")).len(), 100);
}

#[test]
fn build_is_byte_identical_across_runs_and_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 30, 0.0, 0.5);
    assert!(ptr(&["build", "--config", s(&cfg), "--jobs", "1"]).status.success());
    let first = snapshot(&dir.path().join("out"));
    assert!(ptr(&["build", "--config", s(&cfg), "--jobs", "8"]).status.success());
    assert_eq!(first, snapshot(&dir.path().join("out")));
}

#[test]
fn build_with_strictest_filter_fails_as_contract_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 10, 0.0, 0.5);
    let out = ptr(&["build", "--config", s(&cfg), "--kappa", "1", "--delta", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kappa"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(ptr(&["build", "--config", s(&missing)]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"endpoints": {}, "paths": {}, "surprise": 1}"#).unwrap();
    assert_eq!(ptr(&["build", "--config", s(&bad)]).status.code(), Some(2));

    let cfg = toy_config(dir.path(), 3, 0.0, 0.5);
    assert_eq!(ptr(&["build", "--config", s(&cfg), "--kappa", "1.5"]).status.code(), Some(2));
    assert_eq!(ptr(&["refine", "--input", s(&cfg), "--k", "11"]).status.code(), Some(2));
}

#[test]
fn emit_train_reproduces_build_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 12, 0.0, 0.5);
    assert!(ptr(&["build", "--config", s(&cfg)]).status.success());
    let again = dir.path().join("again.jsonl");
    let out = ptr(&["emit-train", "--dir", s(&dir.path().join("out")), "--output", s(&again)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(dir.path().join("out/train.jsonl")).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn clean_drops_noise_duplicates_and_leaks() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    write_lines(
        &raw,
        &[
            json!({"id": "a", "text": "<p>How many legs do three spiders have?</p>"}),
            json!({"id": "b", "text": "how many legs do three spiders have?"}),
            json!({"id": "c", "text": "hi"}),
            json!({"id": "d", "text": "What is the capital city of France today?"}),
            json!({"id": "e", "text": "Name a prime number larger than twenty."}),
        ],
    );
    let eval = dir.path().join("eval.jsonl");
    write_lines(&eval, &[json!({"id": "x", "text": "What is the capital city of France today?"})]);
    let cleaned = dir.path().join("clean.jsonl");
    let out = ptr(&["clean", "--input", s(&raw), "--eval", s(&eval), "--output", s(&cleaned)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rejected_noise"], 1);
    assert_eq!(report["deduped"], 1);
    assert_eq!(report["leaked"], 1);
    let ids: Vec<_> = read_lines(&cleaned).iter().map(|q| q["id"].as_str().unwrap().to_owned()).collect();
    assert_eq!(ids, ["a", "e"]);
}

#[test]
fn loss_check_golden_cases_pass() {
    let cases = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/loss_cases.json");
    let out = ptr(&["loss-check", "--cases", s(&cases), "--grad-instances", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.ends_with(" ok")).count(), 6);
}

#[test]
fn loss_check_flags_wrong_expected_total() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dir.path().join("cases.json");
    fs::write(
        &cases,
        json!([{"name": "off", "p": [0.5], "c": [], "lambdas": [1.0, 0.0, 0.0], "expected_total": 0.7}]).to_string(),
    )
    .unwrap();
    let out = ptr(&["loss-check", "--cases", s(&cases), "--grad-instances", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn separation_with_identical_scores_reports_p_one() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    let rows: Vec<Value> = (0..8).map(|i| json!({"item_id": i, "weak": 0.4, "strong": 0.4})).collect();
    write_lines(&pairs, &rows);
    let out = ptr(&["validate-separation", "--input", s(&pairs), "--json"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v[0]["p_value"], 1.0);
    assert_eq!(v[0]["significant"], false);
}

#[test]
fn separation_groups_by_task() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    let mut rows = Vec::new();
    for i in 0..30 {
        rows.push(json!({"task": "math", "item_id": i, "weak": 0.1 * (i % 5) as f64, "strong": 0.9}));
        rows.push(json!({"task": "arc", "item_id": i, "weak": 0.5, "strong": 0.5 + 0.01 * ((i % 3) as f64 - 1.0)}));
    }
    write_lines(&pairs, &rows);
    let out = ptr(&["validate-separation", "--input", s(&pairs), "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v[0]["task"], "math");
    assert_eq!(v[0]["significant"], true);
    assert_eq!(v[1]["task"], "arc");
    assert_eq!(v[1]["significant"], false);
    let table = ptr(&["validate-separation", "--input", s(&pairs)]);
    assert!(String::from_utf8_lossy(&table.stdout).contains("z = "));
}

#[test]
fn refine_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let queries = dir.path().join("q.jsonl");
    toy_queries(&queries, 4);
    let sessions = dir.path().join("sessions.jsonl");
    let out = ptr(&["refine", "--input", s(&queries), "--k", "3", "--output", s(&sessions)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_lines(&sessions);
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r["traces"].as_array().unwrap().len(), 3);
    }

    let gold = dir.path().join("gold.jsonl");
    let gold_rows: Vec<Value> = (0..4).map(|i| json!({"id": format!("q{i}"), "answer": "42"})).collect();
    write_lines(&gold, &gold_rows);
    let report = dir.path().join("report.json");
    let out = ptr(&[
        "eval",
        "--sessions",
        s(&sessions),
        "--task",
        "toy",
        "--metric",
        "exact-match",
        "--gold",
        s(&gold),
        "--baseline",
        "10",
        "--output",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.starts_with("Iteration"));
    assert!(table.contains("Baseline"));
    let v: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["report"]["per_iteration"].as_array().unwrap().len(), 3);

    let judged = ptr(&[
        "eval",
        "--sessions",
        s(&sessions),
        "--metric",
        "external-judge",
        "--judge-cmd",
        "cat >/dev/null; echo 0.5",
        "--output",
        s(&report),
    ]);
    assert!(judged.status.success(), "{}", String::from_utf8_lossy(&judged.stderr));
    let v: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["report"]["per_iteration"][0]["score"], 50.0);
}

#[test]
fn eval_without_gold_for_exact_match_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = dir.path().join("s.jsonl");
    fs::write(&sessions, "").unwrap();
    let out = ptr(&["eval", "--sessions", s(&sessions), "--metric", "exact-match"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn refine_provider_failure_keeps_partial_sessions_and_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let queries = dir.path().join("q.jsonl");
    toy_queries(&queries, 1);
    let sessions = dir.path().join("sessions.jsonl");
    // Port 1 on loopback refuses connections.
    let out = ptr(&["refine", "--input", s(&queries), "--base-url", "http://127.0.0.1:1/v1", "--output", s(&sessions)]);
    assert_eq!(out.status.code(), Some(3));
    let rows = read_lines(&sessions);
    assert_eq!(rows.len(), 1);
    assert!(rows[0]["aborted"].is_string());
}
