use std::path::Path;
use std::process::{Command, Output};

fn napsu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_napsu")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn calibrate_prints_sigma_meeting_delta() {
    let v = stdout_json(&napsu(&["calibrate", "--epsilon", "1", "--delta", "1e-6", "--full-sets", "3"]));
    let sens = v["sensitivity"].as_f64().unwrap();
    assert!((sens - 6f64.sqrt()).abs() < 1e-15);
    let achieved = v["achieved_delta"].as_f64().unwrap();
    assert!(achieved <= 1e-6 && achieved > 1e-6 - 1e-12);
    assert!(v["sigma"].as_f64().unwrap() > 0.0);
}

#[test]
fn calibrate_without_sensitivity_is_a_config_error() {
    let out = napsu(&["calibrate", "--epsilon", "1", "--delta", "1e-6"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_then_analyze_agree() {
    let dir = tempfile::tempdir().unwrap();
    let gen_dir = dir.path().join("gen");
    let gen = stdout_json(&napsu(&[
        "generate", "--toy-n", "400", "--epsilon", "1", "--m", "4", "--seed", "11",
        "--output-dir", gen_dir.to_str().unwrap(),
        "--dependent", "x3", "--independents", "x1,x2",
    ]));
    assert_eq!(gen["m"], 4);
    assert_eq!(gen["n"], 400);
    for f in ["manifest.json", "release.json", "posterior.json", "synthetic/syn_003.csv"] {
        assert!(gen_dir.join(f).exists(), "{f} missing");
    }

    let report = dir.path().join("report.json");
    let out = napsu(&[
        "analyze", "--dir", gen_dir.to_str().unwrap(), "--dependent", "x3", "--independents", "x1,x2",
        "--output", report.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let analyzed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(analyzed, gen["intervals"]);
    let names: Vec<_> = analyzed.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["intercept", "x1", "x2"]);
}

#[test]
fn single_dataset_with_analysis_exits_2() {
    let out = napsu(&[
        "generate", "--toy-n", "200", "--epsilon", "1", "--m", "1", "--dependent", "x3", "--independents", "x1,x2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"data": {"kind": "toy", "n": 300}, "queries": [], "epsilon": 2.0, "delta": 1e-5, "m": 3, "seed": 5}"#,
    )
    .unwrap();
    let v = stdout_json(&napsu(&["generate", "--config", cfg.to_str().unwrap(), "--m", "2", "--n-syn", "50"]));
    assert_eq!(v["m"], 2);
    assert_eq!(v["n_syn"], 50);
}

#[test]
fn experiment_writes_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let plots = dir.path().join("plots");
    let report = dir.path().join("report.json");
    let v = stdout_json(&napsu(&[
        "experiment", "--scenario", "toy", "--mode", "minus-both", "--repeats", "3", "--epsilons", "0.5,1",
        "--n", "500", "--seed", "2", "--plot-dir", plots.to_str().unwrap(), "--report", report.to_str().unwrap(),
    ]));
    assert_eq!(v["mode"], "minus_both");
    assert!(!v["coverage"].as_array().unwrap().is_empty());
    for f in ["coverage.csv", "width_ratio.csv", "intervals.csv"] {
        assert!(Path::new(&plots.join(f)).exists(), "{f} missing");
    }
    assert!(report.exists());
}
