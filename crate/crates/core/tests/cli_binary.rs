use std::path::Path;
use std::process::{Command, Output};

fn bptandem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bptandem")).args(args).output().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn exact_spec_reports_mm1_idle_probability() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exact.toml");
    std::fs::write(
        &config,
        "command = \"exact\"\n[model]\nlambda = 0.5\nN = 1\n[exact]\ncap = 30\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = bptandem(&["exact", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&out_dir.join("exact.csv"));
    let idle = rows.iter().find(|r| r[3] == "p_q1_eq_0").expect("idle row");
    assert!((idle[4].parse::<f64>().unwrap() - 0.5).abs() < 1e-8);
    assert!(out_dir.join("exact.json").exists());
    assert!(out_dir.join("provenance.json").exists());
}

#[test]
fn scan_reports_a_flag_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scan.toml");
    std::fs::write(
        &config,
        "[run]\nseeds = [1, 2, 3]\ntime_horizon = 4000.0\nsample_count = 2000\n[scan]\nlambdas = [0.15, 0.35]\nNs = [10, 20, 40]\n",
    )
    .unwrap();
    let out = bptandem(&["scan", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("scan.csv"));
    let flags: Vec<&Vec<String>> = rows.iter().filter(|r| r[3] == "saturation_flag").collect();
    assert_eq!(flags.len(), 2);
    assert_eq!(flags[0][0].parse::<f64>().unwrap(), 0.15);
    assert_eq!(flags[1][0].parse::<f64>().unwrap(), 0.35);
}

#[test]
fn supercritical_stationary_request_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bptandem(&["simulate", "--lambda", "1.2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("λ < 1 required for stationary estimation"), "{err}");
    assert!(!dir.path().join("simulate.csv").exists());
}

#[test]
fn failing_fit_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("zeros.txt");
    std::fs::write(&input, "0\n".repeat(500)).unwrap();
    let out = bptandem(&["fit-tail", "--input", input.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("fit-tail.csv").exists());
}
