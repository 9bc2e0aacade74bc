use std::path::Path;
use std::process::{Command, Output};

fn ihm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ihm"))
        .args(args)
        .env_remove("IHM_OUT")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn dims_of_the_double_triangle() {
    let out = ihm(&["dims", "--complex", "sample:double-triangle"]);
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        r#"{"F":2,"E":3,"V":3,"metric_dim":3,"relations":3,"teich_dim":0}"#
    );
    let text = ihm(&["dims", "--complex", "sample:book", "--format", "text"]);
    let text = String::from_utf8(text.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("teich_dim") && l.trim_end().ends_with('2')), "{text}");
}

#[test]
fn complete_check_accepts_the_zero_metric_and_rejects_a_shifted_one() {
    let out = ihm(&["complete-check", "--complex", "sample:double-triangle", "--metric", "zero"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["complete"], true);
    assert!(v["residuals"].as_array().unwrap().iter().all(|r| r["residual"] == 0.0));

    let dir = tempfile::tempdir().unwrap();
    let metric = dir.path().join("m.json");
    std::fs::write(&metric, r#"{"shifts":{"0":[0.3],"1":[0.0],"2":[0.0]}}"#).unwrap();
    let out = ihm(&["complete-check", "--complex", "sample:double-triangle", "--metric", p(&metric)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "IncompleteMetric");
}

#[test]
fn validation_errors_are_json_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("c.json");
    std::fs::write(&bad, r#"{"triangles": 1, "edge_classes": [{"slots": [[0, 0, 1], [0, 1, 1]]}]}"#).unwrap();
    let out = ihm(&["validate", "--complex", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "MissingSlot");

    let out = ihm(&["validate", "--complex", "sample:book", "--metric", "random:3"]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["metrics_complete"][0], true);

    let out = ihm(&["solve", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "UsageError");
}

#[test]
fn identity_solve_reports_twice_the_truncated_area() {
    let dir = tempfile::tempdir().unwrap();
    let out = ihm(&[
        "solve", "--complex", "sample:double-triangle", "--sigma", "zero", "--tau", "zero", "--h", "0.05", "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let (e, a) = (v["energy"].as_f64().unwrap(), v["truncated_area"].as_f64().unwrap());
    assert!((e - 2.0 * a).abs() <= 0.01 * 2.0 * a, "{e} vs {}", 2.0 * a);
    for f in ["map.json", "report.json", "trace.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn runs_are_byte_identical() {
    let run = |dir: &Path, threads: &str| {
        let out = ihm(&[
            "--threads", threads, "solve", "--complex", "sample:book", "--sigma", "random:5", "--tau", "random:6",
            "--h", "0.2", "--stretch", "1.3", "--ycut-schedule", "2,4", "--out", p(dir),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let map = dir.join("map.json");
        let diag = dir.join("diag.json");
        let out = ihm(&["--threads", threads, "verify", "--map", p(&map), "--out", p(&diag)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path(), "1");
    run(b.path(), "1");
    run(c.path(), "4");
    let same = |x: &Path, y: &Path, f: &str| std::fs::read(x.join(f)).unwrap() == std::fs::read(y.join(f)).unwrap();
    for f in ["map.json", "report.json", "trace.csv", "diag.json", "balance.csv", "hopf.csv"] {
        assert!(same(a.path(), b.path(), f), "{f}");
    }
    // the solver config records the thread mode, everything computed must agree
    for f in ["map.json", "trace.csv", "diag.json", "balance.csv", "hopf.csv"] {
        assert!(same(a.path(), c.path(), f), "{f} with 4 threads");
    }
}

#[test]
fn unconverged_solve_exits_two_and_still_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ihm(&[
        "solve", "--complex", "sample:book", "--sigma", "random:5", "--tau", "random:6", "--h", "0.2", "--stretch",
        "1.3", "--max-iterations", "1", "--gradient-tol", "1e-300", "--out", p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["converged"], false);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], false);
    assert!(dir.path().join("map.json").exists());
}

#[test]
fn verify_and_report_read_the_solve_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ihm"))
        .args(["solve", "--complex", "sample:book", "--sigma", "random:2", "--tau", "random:9", "--h", "0.2"])
        .env("IHM_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = Command::new(env!("CARGO_BIN_EXE_ihm"))
        .args(["verify", "--map", p(&dir.path().join("map.json")), "--seed", "11"])
        .env("IHM_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["degree"], 1);
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diag.json")).unwrap()).unwrap();
    assert_eq!(diag["degree"]["seed"], 11);
    let balance = std::fs::read_to_string(dir.path().join("balance.csv")).unwrap();
    assert!(balance.starts_with("edge,y,flux,hopf_im,central"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let out = ihm(&["report", "--run", p(dir.path())]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["energy", "degree", "max strong balance", "edge bound ratio"] {
        assert!(text.contains(key), "{text}");
    }
}
