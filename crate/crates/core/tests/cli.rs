//! The `hardbench` binary: exit codes, output-directory precedence, manifests.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hardbench"));
    c.env_remove("HARDBENCH_OUT");
    c
}

fn small_sim(out: &Path) -> Vec<String> {
    ["simulate", "--d", "15", "--seeds", "3", "--alphas", "0.5,2", "--out"]
        .iter()
        .map(|s| s.to_string())
        .chain([out.to_string_lossy().into_owned()])
        .collect()
}

#[test]
fn simulate_writes_data_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = bin().args(small_sim(&out)).status().unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["simulation.csv", "simulation.json", "crossover.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1, 2]));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["rng"].as_str().unwrap().contains("ChaCha8"));
    // 2 settings x 2 alphas x 3 seeds, plus the header
    let csv = std::fs::read_to_string(out.join("simulation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(bin()
        .args(small_sim(&a))
        .args(["--workers", "1"])
        .status()
        .unwrap()
        .success());
    assert!(bin()
        .args(small_sim(&b))
        .args(["--workers", "2"])
        .status()
        .unwrap()
        .success());
    assert_eq!(
        std::fs::read(a.join("simulation.csv")).unwrap(),
        std::fs::read(b.join("simulation.csv")).unwrap()
    );
}

#[test]
fn out_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("env");
    let status = bin()
        .args(["theory", "--alphas", "1,2"])
        .env("HARDBENCH_OUT", &env_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(env_dir.join("theory.csv").exists());

    let flag_dir = dir.path().join("flag");
    let status = bin()
        .args(["theory", "--alphas", "1,2", "--out"])
        .arg(&flag_dir)
        .env("HARDBENCH_OUT", dir.path().join("unused"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(flag_dir.join("theory.csv").exists());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin().arg("--version").output().unwrap().status.code(), Some(0));
    assert_eq!(bin().arg("nonsense").output().unwrap().status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"alphas": [2.0, 1.0]}"#).unwrap();
    let o = bin().arg("theory").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("strictly increasing"));

    let o = bin()
        .args(["report", "--input"])
        .arg(dir.path().join("missing.csv"))
        .arg("--out")
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_reads_existing_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(bin().args(small_sim(&out)).status().unwrap().success());
    let before = std::fs::read(out.join("crossover.json")).unwrap();
    std::fs::remove_file(out.join("crossover.json")).unwrap();
    assert!(bin().arg("report").arg("--out").arg(&out).status().unwrap().success());
    assert_eq!(std::fs::read(out.join("crossover.json")).unwrap(), before);
}

#[test]
fn bench_on_ingested_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let mut text = String::from("a,b,label\n");
    for i in 0..80 {
        let y = if i % 2 == 0 { "yes" } else { "no" };
        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
        text.push_str(&format!(
            "{},{},{y}\n",
            s * 2.0 + (i as f64 * 0.37).sin(),
            (i as f64 * 0.11).cos()
        ));
    }
    std::fs::write(&data, text).unwrap();
    let out = dir.path().join("bench");
    let o = bin()
        .args(["bench", "--seeds", "1", "--ks", "3", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("bench_results.csv")).unwrap();
    assert!(csv.starts_with("bench_type,metric,k,seed,test_accuracy,test_loss"));
    assert_eq!(csv.lines().count(), 4);
}
