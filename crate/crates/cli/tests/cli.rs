use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kdssl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdssl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn kdssl")
}

const SMALL: &str = r#"{
  "version": 1,
  "name": "tiny",
  "dataset": {"synthetic": {"spec": {"counts": [40, 20, 20], "dimension": 4, "separation": 4.0}, "seed": 3}},
  "split": {"labeled_fraction": 0.3},
  "seeds": [1, 2],
  "mode": "proposed-ssl",
  "train": {"ensemble_size": 2, "epochs": 3, "iterations": 2, "batch_size": 16, "threshold": 0.6},
  "sweep": {"lambda": [0.0, 1.0]},
  "output": "out"
}"#;

fn write_config(dir: &Path, text: &str) {
    fs::write(dir.join("exp.json"), text).unwrap();
}

#[test]
fn run_writes_results_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let out = kdssl(&["--threads", "1", "run", "exp.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = fs::read_dir(dir.path().join("out/runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(runs.iter().filter(|n| !n.ends_with(".timing.json")).count(), 2);
    assert_eq!(runs.iter().filter(|n| n.ends_with(".timing.json")).count(), 2);
    let summary = fs::read_to_string(dir.path().join("out/tables/summary.csv")).unwrap();
    assert!(summary.starts_with("method,p,K,lambda,T,tau,BAcc,Acc,AccStar,F1"));
    assert!(summary.contains("Proposed (K=2)"));
}

#[test]
fn seed_and_out_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let out = kdssl(&["run", "exp.json", "--seed", "7", "--out", "elsewhere"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<String> = fs::read_dir(dir.path().join("elsewhere/runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().all(|n| n.contains("seed7")));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn sweep_runs_every_point_and_report_rebuilds() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let out = kdssl(&["sweep", "exp.json", "--seed", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tables = dir.path().join("out/tables");
    let first = fs::read_to_string(tables.join("summary.csv")).unwrap();
    assert!(tables.join("plot_lambda.csv").exists());
    fs::remove_dir_all(&tables).unwrap();

    let out = kdssl(&["report", "out"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(tables.join("summary.csv")).unwrap(), first);

    fs::write(dir.path().join("out/runs/broken.json"), "{ not json").unwrap();
    let out = kdssl(&["report", "out"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.json"));
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &SMALL.replace("\"epochs\": 3", "\"epochs\": \"three\""));
    let out = kdssl(&["run", "exp.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochs"));

    write_config(dir.path(), &SMALL.replace("\"seeds\": [1, 2]", "\"seeds\": []"));
    assert_eq!(kdssl(&["run", "exp.json"], dir.path()).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        &SMALL.replace("\"threshold\": 0.6", "\"threshold\": 0.6, \"learning_rate\": 1e300"),
    );
    let out = kdssl(&["run", "exp.json", "--seed", "1"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/failures.json").exists());
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdssl(&["report", "."], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no data"));
}

#[test]
fn gen_data_round_trips_through_a_manifest_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("blobs.json"),
        r#"{"synthetic": {"spec": {"counts": [40, 20, 20], "dimension": 4, "separation": 4.0}}}"#,
    )
    .unwrap();
    let out = kdssl(&["gen-data", "blobs.json", "blobs.csv", "--seed", "3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("blobs.csv")).unwrap();
    assert!(text.starts_with("# kdssl-dataset v1 kind=vector classes=3"));
    assert_eq!(text.lines().count(), 2 + 80);

    // Same data through the manifest source gives the same results.
    let manifest = SMALL.replace(
        r#"{"synthetic": {"spec": {"counts": [40, 20, 20], "dimension": 4, "separation": 4.0}, "seed": 3}}"#,
        r#"{"manifest": {"path": "blobs.csv"}}"#,
    );
    write_config(dir.path(), &manifest);
    assert!(kdssl(&["run", "exp.json", "--seed", "1", "--out", "a"], dir.path())
        .status
        .success());
    write_config(dir.path(), SMALL);
    assert!(kdssl(&["run", "exp.json", "--seed", "1", "--out", "b"], dir.path())
        .status
        .success());
    let read = |d: &str| {
        let mut v: Vec<_> = fs::read_dir(dir.path().join(d).join("runs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| !p.to_string_lossy().ends_with(".timing.json"))
            .collect();
        v.sort();
        let r: serde_json::Value = serde_json::from_slice(&fs::read(&v[0]).unwrap()).unwrap();
        r["primary"].clone()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn zero_threads_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdssl(&["--threads", "0", "report", "."], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
