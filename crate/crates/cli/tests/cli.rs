use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn eyas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eyas"))
        .args(args)
        .env_remove("EYAS_CONFIG")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        out.push((rel, std::fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn analyze_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    let gen = eyas(&["gen", "--count", "3", "--seed", "5", "--out", s(&corpus)]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let r = eyas(&["--jobs", "2", "analyze", "--input", s(&corpus.join("images")), "--out", s(&out)]);
            assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
            files(&out)
        })
        .collect();
    assert_eq!(runs[0].len(), 3 * 8);
    assert!(runs[0] == runs[1], "two runs differ");

    let eval = tmp.path().join("eval.json");
    let r = eyas(&["eval", "--corpus", s(&corpus), "--pred", s(&tmp.path().join("a")), "--out", s(&eval)]);
    assert!(r.status.success());
    let v: Value = serde_json::from_slice(&std::fs::read(eval).unwrap()).unwrap();
    assert_eq!(v["segmentation"]["onh"]["n"], 3);
    assert!(v["classification"]["shape"]["per_class"].is_object());
}

#[test]
fn single_file_outputs_land_in_out_dir() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    assert!(eyas(&["gen", "--count", "1", "--out", s(&corpus)]).status.success());
    let out = tmp.path().join("one");
    let r = eyas(&["analyze", "--input", s(&corpus.join("images/img0000.png")), "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["rois.json", "onh_mask.png", "findings.json", "report.txt", "report.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(String::from_utf8_lossy(&r.stdout).contains(report.trim()));
}

#[test]
fn missing_input_exits_2() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing_dir");
    let out = tmp.path().join("out");
    let r = eyas(&["analyze", "--input", s(&missing), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("does not exist"));

    let r = eyas(&["--json-errors", "analyze", "--input", s(&missing), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(v["error"]["code"], "io");
    assert!(v["error"]["message"].as_str().unwrap().contains("missing_dir"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = s(tmp.path());
    for args in [
        vec!["analyze", "--bogus"],
        vec!["--jobs", "0", "gen", "--count", "1", "--out", out],
        vec!["gen", "--count", "1", "--noise", "-1", "--out", out],
        vec!["analyze", "--input", out, "--out", out, "--laterality", "up"],
    ] {
        let r = eyas(&args);
        assert_eq!(r.status.code(), Some(2), "{args:?}");
    }
    let r = eyas(&["--json-errors", "analyze", "--bogus"]);
    assert_eq!(r.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(v["error"]["code"], "usage");
}

#[test]
fn unknown_backend_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    assert!(eyas(&["gen", "--count", "1", "--out", s(&corpus)]).status.success());
    let r = eyas(&[
        "--json-errors",
        "analyze",
        "--input",
        s(&corpus.join("images")),
        "--out",
        s(&tmp.path().join("out")),
        "--backend",
        "nobody@1.0.0",
    ]);
    assert_eq!(r.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(v["error"]["code"], "usage");
}
