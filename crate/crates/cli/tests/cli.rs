use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn ated() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ated"))
}

fn exec(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn ated")
}

fn golden(dir: &Path, steps: usize) -> std::path::PathBuf {
    let path = dir.join("golden.jsonl");
    let out = exec(ated().args(["golden-trace", "--steps", &steps.to_string(), "--out"]).arg(&path));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

const BENCH: &str = r#"{
  "kind": "pope_style_yesno",
  "num_queries": 200,
  "num_models": 2,
  "profiles": [
    {"correct_rate": 0.8, "confident_when_correct": 1.0, "entropy_when_wrong": 0.6},
    {"correct_rate": 0.75, "confident_when_correct": 1.0, "entropy_when_wrong": 0.6}
  ],
  "error_layout": "disjoint",
  "seed": 4
}"#;

#[test]
fn replay_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let trace = golden(dir.path(), 12);
    let run = |report: &str| {
        let out = exec(
            ated()
                .args(["run", "--preset", "llava_bench", "--max-new-tokens", "12", "--prompt-tokens", "0,1,2"])
                .arg("--replay")
                .arg(&trace)
                .arg("--report")
                .arg(dir.path().join(report)),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = std::fs::read_to_string(dir.path().join(report)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for c in v["configs"].as_array_mut().unwrap() {
            c["wall_time_s"] = 0.into();
        }
        v
    };
    let a = run("a.json");
    assert_eq!(a, run("b.json"));
    assert_eq!(a["configs"][0]["steps"], 12);
    assert_eq!(a["synthetic"], false);
}

#[test]
fn sweep_reports_evaluation_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let trace = golden(dir.path(), 8);
    let out = exec(
        ated()
            .args(["run", "--json", "--step", "0.05,0.5", "--epsilon", "0", "--max-new-tokens", "8"])
            .args(["--noise-steps", "500", "--prompt-tokens", "0,1,2"])
            .arg("--replay")
            .arg(&trace),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let fine = v["configs"][0]["total_entropy_evaluations"].as_u64().unwrap();
    let coarse = v["configs"][1]["total_entropy_evaluations"].as_u64().unwrap();
    assert_eq!(fine * 3, coarse * 21);
}

#[test]
fn benchmark_with_assert_passes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bench.json");
    std::fs::write(&spec, BENCH).unwrap();
    let out = exec(ated().args(["run", "--assert", "--benchmark"]).arg(&spec));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("(synthetic)"));
    assert!(table.contains("model0"));
}

#[test]
fn assertion_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bench.json");
    // A hedged but accurate model loses to a confidently wrong one.
    std::fs::write(
        &spec,
        r#"{"kind": "pope_style_yesno", "num_queries": 200, "num_models": 2,
            "profiles": [
              {"correct_rate": 0.95, "confident_when_correct": 0.0, "entropy_when_wrong": 1.5},
              {"correct_rate": 0.6, "confident_when_correct": 1.0, "entropy_when_wrong": 1.0}
            ], "seed": 1}"#,
    )
    .unwrap();
    let out = exec(ated().args(["run", "--assert", "--benchmark"]).arg(&spec));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn config_errors_exit_2() {
    let cases: &[&[&str]] = &[
        &["run"],
        &["run", "--replay", "x.jsonl", "--step", "0"],
        &["run", "--replay", "x.jsonl", "--strategy", "top_k:0"],
        &["run", "--replay", "x.jsonl", "--renormalize", "cubic"],
        &["run", "--providers", "ftp://nowhere"],
        &["run", "--preset", "coco", "--replay", "x.jsonl"],
        &["run", "--alpha", "nope"],
    ];
    for args in cases {
        let out = exec(ated().args(*args));
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn provider_errors_exit_3() {
    let out = exec(ated().args(["run", "--replay", "/nonexistent/trace.jsonl"]));
    assert_eq!(out.status.code(), Some(3));
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let out = exec(ated().args(["run", "--providers", &format!("remote:{addr}")]));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn serve_and_run_remote() {
    let dir = tempfile::tempdir().unwrap();
    let trace = golden(dir.path(), 6);
    let mut servers = Vec::new();
    let mut endpoints = Vec::new();
    for m in 0..3 {
        let mut child = ated()
            .args(["serve", "--listen", "127.0.0.1:0", "--model-index", &m.to_string(), "--trace"])
            .arg(&trace)
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("serving on ").expect("address line").to_owned();
        endpoints.push(format!("remote:{addr}"));
        servers.push(child);
    }
    let common = ["--max-new-tokens", "6", "--noise-steps", "500", "--prompt-tokens", "0,1,2", "--json"];
    let remote = exec(ated().arg("run").args(common).args(["--providers", &endpoints.join(",")]));
    let local = exec(ated().arg("run").args(common).arg("--replay").arg(&trace));
    for mut s in servers {
        let _ = s.kill();
        let _ = s.wait();
    }
    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    let tokens = |o: &Output| {
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["configs"][0]["tokens"].clone()
    };
    assert_eq!(tokens(&remote), tokens(&local));
}
