//! Runs every `weakreg` subcommand once on a tiny corpus.

use std::path::Path;
use std::process::Command;

fn weakreg(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_weakreg")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "weakreg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn subcommands_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("synth.json"),
        r#"{"phantom": {"dims": [16, 16, 16]}, "train_cases": 2, "held_out_cases": 1}"#,
    )
    .unwrap();
    std::fs::write(d.join("run.json"), r#"{"network": {"n0": 2}, "train": {"iterations": 2, "batch_size": 2}}"#).unwrap();

    let corpus = d.join("corpus");
    let manifest = weakreg(&["synth", "--spec", s(&d.join("synth.json")), "--out", s(&corpus)]);
    assert!(manifest.trim().ends_with("corpus.json"));
    let manifest = corpus.join("corpus.json");

    let run = d.join("run");
    let line = weakreg(&["train", "--config", s(&d.join("run.json")), "--corpus", s(&manifest), "--out", s(&run)]);
    assert!(line.starts_with("iteration 1:"), "{line}");
    assert!(run.join("final.json").exists() && run.join("loss.csv").exists());

    let case = corpus.join("case_0002");
    let ddf = d.join("ddf");
    weakreg(&[
        "register",
        "--checkpoint",
        s(&run.join("final")),
        "--moving",
        s(&case.join("moving")),
        "--fixed",
        s(&case.join("fixed")),
        "--out",
        s(&ddf),
        "--warped",
        s(&d.join("warped")),
    ]);
    assert!(d.join("warped.raw").exists());

    weakreg(&["warp", "--input", s(&case.join("gland_moving")), "--ddf", s(&ddf), "--out", s(&d.join("gland_warped"))]);
    assert!(d.join("gland_warped.json").exists());

    let csv = weakreg(&[
        "evaluate",
        "--checkpoint",
        s(&run.join("final")),
        "--corpus",
        s(&manifest),
        "--report",
        s(&d.join("report.json")),
        "--maps",
        s(&d.join("maps")),
    ]);
    assert!(csv.starts_with("metric,median"));
    assert!(d.join("maps/case_0002/jacobian.json").exists());

    let summary = weakreg(&["inspect", "--ddf", s(&ddf), "--out", s(&d.join("inspect"))]);
    assert!(summary.contains("negative_jacobian"));
}

#[test]
fn bad_input_reports_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_weakreg"))
        .args(["inspect", "--ddf", "/nonexistent/field", "--out", "/tmp/never"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
