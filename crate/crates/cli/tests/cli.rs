//! End-to-end checks of the fast CLI paths: exit codes, dry runs, artifact
//! layouts, and byte-level reproducibility under a fixed seed.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_local4d"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("local4d_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn no_arguments_is_usage_error() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "stderr: {err}");
}

#[test]
fn unknown_flag_rejected() {
    let out = bin().args(["gen", "--not-a-flag", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Commands"));
}

#[test]
fn dry_run_produces_no_files() {
    let dir = tmp("dry");
    let out_dir = dir.join("seq");
    let out = bin()
        .args(["--dry-run", "gen", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("plan"));
    assert!(!out_dir.exists());
}

#[test]
fn gen_is_byte_identical_under_fixed_seed() {
    let dir = tmp("gen_det");
    for name in ["a", "b"] {
        let out = bin()
            .args(["--seed", "9", "gen", "--frames", "3", "--cloud-density", "500", "--out"])
            .arg(dir.join(name))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = dir_bytes(&dir.join("a"));
    let b = dir_bytes(&dir.join("b"));
    assert_eq!(a.len(), b.len());
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(ba, bb, "file {na} differs between identical runs");
    }
    // expected layout
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    for expect in [
        "clothed_000.obj",
        "body_002.obj",
        "params.json",
        "template.l4db",
        "meta.json",
        "cloud_001.ply",
        "obs.json",
    ] {
        assert!(names.contains(&expect), "missing {expect}");
    }
}

#[test]
fn eval_self_comparison_is_exact() {
    let dir = tmp("eval");
    let seq = dir.join("seq");
    bin()
        .args(["--seed", "3", "gen", "--frames", "2", "--out"])
        .arg(&seq)
        .status()
        .unwrap();
    let report = dir.join("report.json");
    let out = bin()
        .args(["--json", "eval", "--samples", "4000", "--pred"])
        .arg(&seq)
        .arg("--gt")
        .arg(&seq)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["mean"]["chamfer_l2"].as_f64().unwrap(), 0.0);
    assert_eq!(parsed["mean"]["f_score"].as_f64().unwrap(), 1.0);
}

#[test]
fn report_emits_csv_and_svg() {
    let dir = tmp("report");
    let csv = dir.join("loss.csv");
    std::fs::write(
        &csv,
        "step,loss_surface,loss_eikonal,loss_latent,total\n0,1.0,0.5,0.1,1.2\n1,0.8,0.4,0.1,0.9\n2,0.5,0.3,0.1,0.6\n",
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = bin()
        .args(["report", "--loss-csv"])
        .arg(&csv)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = std::fs::read_to_string(out_dir.join("plot.svg")).unwrap();
    assert!(svg.contains("<svg") && svg.contains("polyline"));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.contains("total_loss"));
}

#[test]
fn runtime_failure_exits_two() {
    let out = bin()
        .args(["eval", "--pred", "/nonexistent_a", "--gt", "/nonexistent_b"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
