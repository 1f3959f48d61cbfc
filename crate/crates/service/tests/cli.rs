use std::process::{Command, Output};

fn routerec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_routerec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn validate_builtin_and_file() {
    let out = routerec(&["validate", "--config", "paper"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("3 routes, 5 states"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\n[game]\nstates = []\nprior = []\ncoeffs = []\n").unwrap();
    let out = routerec(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn obedience_and_wardrop() {
    let out = routerec(&["check-obedience"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("obedient: true"));
    assert_eq!(text.matches("slack[").count(), 6);

    let out = routerec(&["wardrop"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("ratio 0.869"), "{}", stdout(&out));
}

#[test]
fn design_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("design.json");
    let out = routerec(&["design", "--restarts", "4", "--seed", "1", "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert!(v["cost"].as_f64().unwrap() < 13.784);
}

#[test]
fn simulate_writes_trajectory_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.jsonl");
    let out = routerec(&["simulate", "--rounds", "100000", "--seed", "7", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    let line = text.lines().find(|l| l.starts_with("mean theta over last")).unwrap();
    let theta: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(theta < 0.05, "{line}");
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    assert_eq!(lines, 100_000);

    let out = routerec(&["simulate", "--rounds", "10", "--m1", "-84", "--window", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn batch_then_analyze_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("batch");
    let run = |dir: &std::path::Path| {
        routerec(&["run-batch", "--sessions", "4", "--rounds", "50", "--seed", "9", "--out", dir.to_str().unwrap()])
    };
    let out = run(&out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("4 sessions x 50 rounds"));
    assert!(out_dir.join("lineage.json").exists());

    let again = dir.path().join("again");
    assert!(run(&again).status.success());
    for s in 1..=4 {
        let name = format!("logs/session_{s:03}.jsonl");
        assert_eq!(
            std::fs::read(out_dir.join(&name)).unwrap(),
            std::fs::read(again.join(&name)).unwrap()
        );
    }

    let logs = out_dir.join("logs");
    let out = routerec(&["analyze", "--logs", logs.to_str().unwrap(), "--band", "none", "--min-rating", "4", "--min-regret", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("4 participants, 200 rounds"));
    assert!(text.contains("H4 (0, 4, "));

    let export = dir.path().join("export");
    let out = routerec(&["export", "--logs", logs.to_str().unwrap(), "--out", export.to_str().unwrap()]);
    assert!(out.status.success());
    for f in ["h1_follow.csv", "h2_participants.csv", "h3_defection.csv", "h4_points.csv", "summary.json"] {
        assert!(export.join(f).exists(), "{f}");
    }
}

#[test]
fn bad_flags_rejected() {
    assert!(!routerec(&["analyze", "--logs", "x", "--band", "5,1"]).status.success());
    assert!(!routerec(&["frobnicate"]).status.success());
}
