use std::path::Path;
use std::process::{Command, Output};

fn eitshape(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eitshape"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_is_reproducible_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |stem: &str| eitshape(&["simulate", "--phantom", "exp1", "--seed", "7", "--out", stem], dir.path());
    let first = run("a/data");
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("coverage"));
    let second = run("b/data");
    assert!(second.status.success());
    let a = std::fs::read(dir.path().join("a/data.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/data.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 241);
    assert_eq!(text.lines().next(), Some("drive_j,electrode_m,voltage,noise_std"));

    let again = run("a/data");
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force") || stderr(&again).contains("exists"), "{}", stderr(&again));
    let forced = eitshape(&["simulate", "--phantom", "exp1", "--seed", "7", "--out", "a/data", "--force"], dir.path());
    assert!(forced.status.success());
}

#[test]
fn exp2_sidecar_reports_two_fifths_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let out = eitshape(&["simulate", "--phantom", "exp2", "--seed", "3", "--out", "d"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("d.json")).unwrap()).unwrap();
    assert!((meta["coverage"].as_f64().unwrap() - 0.4).abs() < 1e-9);
    assert_eq!(meta["stand_in"], serde_json::Value::Bool(true));
    assert_eq!(meta["electrodes"].as_u64(), Some(16));
}

#[test]
fn bad_configuration_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\n  \"seed\": 3,\n  \"electrodez\": 8\n}\n").unwrap();
    let out = eitshape(&["simulate", "--config", "bad.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("electrodez") && err.contains("line 3"), "{err}");

    std::fs::write(dir.path().join("invalid.json"), "{\"electrodes\": 2}").unwrap();
    let out = eitshape(&["simulate", "--config", "invalid.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn mesh_export_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = eitshape(&["mesh", "export", "--phantom", "exp2", "--h", "0.3", "--out", "m.json"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let mesh: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert!(mesh.is_object());
    let again = eitshape(&["mesh", "export", "--out", "m.json"], dir.path());
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn check_jacobians_exit_code_matches_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = eitshape(&["check-jacobians", "--sigma-stride", "4"], dir.path());
    let text = stdout(&out);
    assert!(text.contains("potential unknowns") && text.contains("theta"), "{text}");
    let failed = text.contains("FAIL");
    assert_eq!(out.status.code(), Some(if failed { 3 } else { 0 }), "{text}");
}

#[test]
fn reconstruct_on_the_true_geometry_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let sim = eitshape(&["simulate", "--phantom", "exp2", "--seed", "5", "--out", "data/exp2"], dir.path());
    assert!(sim.status.success(), "{}", stderr(&sim));
    std::fs::write(dir.path().join("run.json"), "{\"phantom\": \"exp2\", \"grid\": {\"h\": 0.4}}").unwrap();
    let out = eitshape(
        &[
            "reconstruct",
            "--config",
            "run.json",
            "--data",
            "data/exp2",
            "--mode",
            "fixed-geometry-truth",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("run");
    for name in ["report.json", "log.jsonl", "state.json", "boundary.svg", "sigma.svg", "phi.svg"] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let hash = report["config_hash"].as_str().unwrap().to_owned();
    assert!(report["sigma_relative_l2"].as_f64().unwrap() < 1.0);
    assert!(report["final_phi"].as_f64().unwrap().is_finite());
    let svg = std::fs::read_to_string(run.join("sigma.svg")).unwrap();
    assert!(svg.contains(&hash));
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_hash"].as_str(), Some(hash.as_str()));
    }

    let mode = eitshape(&["reconstruct", "--mode", "sideways", "--out", "run2"], dir.path());
    assert!(!mode.status.success());
    assert!(stderr(&mode).contains("sideways"));
}
