use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcc"))
        .args(args)
        .output()
        .expect("dcc runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const MANIFEST: &str = r#"
n = 5
runs_per_setting = 4000
epsilon = 0.3
seed = 7
tests = ["cycle", "epsilon", "repeatability", "chsh"]

[box]
kind = "honest"
"#;

#[test]
fn run_writes_all_outputs_and_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = dcc(&["run", "--n", "5", "--runs", "5000", "--out-dir", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "records.jsonl",
        "chsh_records.jsonl",
        "report.json",
        "summary.csv",
        "manifest.toml",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!fs::read_dir(&out).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .ends_with(".partial")));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("verdict: quantum-contextual"), "{stderr}");
    let report = fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("\"version\": \"delayed-choice "));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let o = dcc(&[
        "run",
        "--n",
        "5",
        "--epsilon",
        "3.0",
        "--out-dir",
        path(&d("bad")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!d("bad").exists());
    let o = dcc(&["run", "--n", "13", "--out-dir", path(&d("bad-n"))]);
    assert_eq!(code(&o), 2);
    let o = dcc(&[
        "certify",
        "--n",
        "4",
        "--certify-ratio",
        "1.5",
        "--out-dir",
        path(&d("bad-ratio")),
    ]);
    assert_eq!(code(&o), 2);
    let o = dcc(&[
        "run",
        "--n",
        "5",
        "--runs",
        "10",
        "--out-dir",
        path(&d("thin")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("verdict: inconclusive"));
    let o = dcc(&["report", "--out-dir", path(&d("missing"))]);
    assert_eq!(code(&o), 1);
    let o = dcc(&[
        "run",
        "--box",
        "automaton",
        "--n",
        "4",
        "--runs",
        "3000",
        "--out-dir",
        path(&d("auto")),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("classical-explained"));
}

#[test]
fn manifest_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    fs::write(&manifest, MANIFEST).unwrap();
    let mut files = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = dcc(&[
            "run",
            "--manifest",
            path(&manifest),
            "--out-dir",
            path(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        files.push(
            ["records.jsonl", "chsh_records.jsonl", "summary.csv"]
                .map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn report_rebuilds_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = dcc(&[
        "certify",
        "--n",
        "4",
        "--runs",
        "6000",
        "--certify-ratio",
        "0.5",
        "--out-dir",
        path(&out),
        "--format",
        "csv",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = dcc(&["report", "--out-dir", path(&out), "--format", "csv"]);
    assert_eq!(code(&r), 0);
    assert_eq!(o.stdout, r.stdout);
}

#[test]
fn sweep_continues_past_failing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = dcc(&[
        "sweep",
        "--axis",
        "n",
        "--values",
        "4,13,5",
        "--runs",
        "2000",
        "--out-dir",
        path(&out),
        "--format",
        "csv",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cell 13 failed"));
    let o = dcc(&[
        "sweep",
        "--axis",
        "a",
        "--values",
        "0,0.5,1",
        "--out-dir",
        path(&out),
    ]);
    assert_eq!(code(&o), 0);
    let o = dcc(&[
        "sweep",
        "--axis",
        "bogus",
        "--values",
        "1",
        "--out-dir",
        path(&out),
    ]);
    assert_eq!(code(&o), 1);
}
