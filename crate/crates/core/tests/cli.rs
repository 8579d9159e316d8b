use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dynoframe(args: &[&str], stdin: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dynoframe"));
    cmd.args(args).env_remove("DYNOFRAME_JOBS");
    match stdin {
        Some(text) => {
            use std::io::Write;
            let mut child = cmd
                .stdin(std::process::Stdio::piped())
                .stdout(std::process::Stdio::piped())
                .stderr(std::process::Stdio::piped())
                .spawn()
                .unwrap();
            child.stdin.take().unwrap().write_all(text.as_bytes()).unwrap();
            child.wait_with_output().unwrap()
        }
        None => cmd.output().unwrap(),
    }
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().find(|l| l.starts_with("{\"error\"")).unwrap_or_else(|| panic!("no error line in {stderr}"));
    serde_json::from_str(line).unwrap()
}

fn gen_world(dir: &Path, n: &str) -> String {
    let prefix = format!("{}/", dir.display());
    let out = dynoframe(&["gen-world", "--seed", "2", "--n", n, "--out-prefix", &prefix], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    prefix
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = dynoframe(&[], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["exit"], 1);
}

#[test]
fn eval_hoi_without_catalog_names_the_flag() {
    let out = dynoframe(&["eval-hoi", "--gt", "a.jsonl", "--det", "b.jsonl"], None);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"], "missing-flag");
    assert_eq!(err["flag"], "--catalog");
}

#[test]
fn missing_input_file_is_reported() {
    let out = dynoframe(&["eval-sir", "--gt", "/nonexistent/gt.jsonl", "--pred", "/nonexistent/p.jsonl"], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "missing-input");
}

#[test]
fn parse_and_serialize_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = gen_world(dir.path(), "20");
    let lexicon = format!("{prefix}lexicon.json");
    let frames = std::fs::read_to_string(format!("{prefix}frames.jsonl")).unwrap();
    let texts: Vec<String> = frames
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["text"].as_str().unwrap().to_string())
        .collect();

    let out = dynoframe(&["parse", "--lexicon", &lexicon], Some(&(texts.join("\n") + "\n")));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(parsed.lines().count(), texts.len());

    let frames_only: String = parsed
        .lines()
        .map(|l| serde_json::to_string(&serde_json::from_str::<Value>(l).unwrap()["frame"]).unwrap() + "\n")
        .collect();
    let out = dynoframe(&["serialize", "--lexicon", &lexicon], Some(&frames_only));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let back: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(str::to_string).collect();
    assert_eq!(back, texts);
}

#[test]
fn strict_parse_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = gen_world(dir.path(), "5");
    let out = dynoframe(&["parse", "--lexicon", &format!("{prefix}lexicon.json")], Some("VERB flying AGENT man\n"));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "parse-failed");
}

#[test]
fn manifest_records_inputs_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = gen_world(dir.path(), "30");
    let report = dir.path().join("r.json");
    let manifest = dir.path().join("m.json");
    let out = dynoframe(
        &[
            "--manifest",
            manifest.to_str().unwrap(),
            "eval-gsr",
            "--gt",
            &format!("{prefix}gsr_gt.jsonl"),
            "--pred",
            &format!("{prefix}gsr_pred.jsonl"),
            "--out",
            report.to_str().unwrap(),
        ],
        None,
    );
    assert!(out.status.success());
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["command"], "eval-gsr");
    assert_eq!(m["exit"], 0);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["metrics"]["grnd_value"].as_f64().unwrap() <= r["metrics"]["value"].as_f64().unwrap());
}

#[test]
fn correlate_reads_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    std::fs::write(&csv, "a,b\n1,1\n2,3\n3,2\n").unwrap();
    let report = dir.path().join("r.json");
    let out = dynoframe(&["correlate", "--in", csv.to_str().unwrap(), "--x", "a", "--y", "b", "--out", report.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["metrics"]["spearman"], 0.5);
    let out = dynoframe(&["correlate", "--in", csv.to_str().unwrap(), "--x", "a", "--y", "zz"], None);
    assert_eq!(error_line(&out)["error"], "unknown-column");
}

#[test]
fn augment_check_passes_at_defaults() {
    let out = dynoframe(&["augment-check", "--trials", "5"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn demo_train_then_generate() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = gen_world(dir.path(), "60");
    let model = dir.path().join("m.dyfm");
    let out = dynoframe(
        &[
            "demo-train",
            "--frames",
            &format!("{prefix}frames.jsonl"),
            "--embeddings",
            &format!("{prefix}embeddings.jsonl"),
            "--lexicon",
            &format!("{prefix}lexicon.json"),
            "--model-out",
            model.to_str().unwrap(),
            "--epochs",
            "2",
            "--hidden",
            "16",
            "--heads",
            "2",
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gen = dir.path().join("g.jsonl");
    let out = dynoframe(
        &[
            "demo-generate",
            "--model",
            model.to_str().unwrap(),
            "--embeddings",
            &format!("{prefix}embeddings.jsonl"),
            "--max-len",
            "8",
            "--out",
            gen.to_str().unwrap(),
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&gen).unwrap().lines().count(), 60);
}
