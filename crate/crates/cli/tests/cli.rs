use std::path::{Path, PathBuf};
use std::process::Command;

use ovbound_cli::commands::{self, Options};
use ovbound_cli::AnalysisConfig;
use serde_json::Value;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ovbound"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn smoke_report_matches_golden_file() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["analyze", "--config"])
        .arg(data_dir().join("smoke.json"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let got = std::fs::read_to_string(out.path().join("report.json")).unwrap();
    let want = std::fs::read_to_string(data_dir().join("smoke_report.json")).unwrap();
    assert_eq!(got, want);

    let v: Value = serde_json::from_str(&got).unwrap();
    for key in ["theta_s", "se", "t_value", "sigma2", "nu2", "scale"] {
        assert!(v["estimate"][key].is_number(), "{key}");
    }
    for s in v["scenarios"].as_array().unwrap() {
        for key in ["bias_bound", "theta_minus", "theta_plus", "conf_lower", "conf_upper"] {
            assert!(s[key].is_number(), "{key}");
        }
    }
    assert_eq!(v["robustness_values"].as_array().unwrap().len(), 2);
    assert!(v["diagnostics"]["fold_seeds"].is_array());
}

#[test]
fn repeated_runs_are_byte_identical_and_seed_flag_matters() {
    let run = |seed: Option<&str>| {
        let out = tempfile::tempdir().unwrap();
        let mut cmd = bin();
        cmd.args(["analyze", "--config"]).arg(data_dir().join("smoke.json")).arg("--out").arg(out.path());
        if let Some(s) = seed {
            cmd.args(["--seed", s, "--threads", "2"]);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(out.path().join("report.json")).unwrap()
    };
    assert_eq!(run(None), run(None));
    assert_eq!(run(Some("3")), run(Some("3")));
    assert_ne!(run(None), run(Some("3")));
}

#[test]
fn failures_print_structured_json_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"data":{"summary":{"theta_s":1,"se":0.1,"scale":1}},"oops":1}"#, "config", 2),
        (r#"{"data":{"csv":{"path":"missing.csv","schema":{"outcome":"y","treatment":"d"}}}}"#, "io", 1),
    ];
    for (text, kind, code) in cases {
        let cfg = write_config(dir.path(), text);
        let out = bin().args(["analyze", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
        assert_eq!(out.status.code(), Some(code));
        let v: Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(v["error"]["kind"], kind);
        assert!(v["error"]["message"].as_str().unwrap().len() > 3);
    }
}

#[test]
fn ratio_example_through_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"data":{"summary":{"theta_s":9189,"se":1500,"scale":119837}},
            "scenarios":[{"params":{"eta_y2":0.04,"eta_d2":0.03,"rho_abs":1}}]}"#,
    );
    commands::run(commands::Command::Analyze, &Options { config: cfg, out: dir.path().into(), seed: None }).unwrap();
    let v: Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let s = &v["scenarios"][0];
    assert_eq!(s["theta_minus"].as_f64().unwrap().round(), 4974.0);
    assert_eq!(s["theta_plus"].as_f64().unwrap().round(), 13404.0);
    assert!((v["z"].as_f64().unwrap() - 1.6449).abs() < 1e-4);
    assert_eq!(v["source"], "summary");
}

fn summary_contour_config(steps: usize, max: f64) -> AnalysisConfig {
    AnalysisConfig::from_json(&format!(
        r#"{{"data":{{"summary":{{"theta_s":0.8,"se":0.05,"sigma2":3.0,"nu2":1.0}}}},
            "contour":{{"eta_d2":{{"min":0,"max":{max},"steps":{steps}}},"eta_y2":{{"min":0,"max":{max},"steps":{steps}}},"quantity":"lower"}}}}"#
    ))
    .unwrap()
}

#[test]
fn contour_csv_shape_and_zero_corner() {
    let dir = tempfile::tempdir().unwrap();
    let grid = commands::contour(&summary_contour_config(3, 0.2), dir.path()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("contour.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["eta_d2", "eta_y2", "value"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 9);
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 0.8);
    assert_eq!(grid.cells.len(), 9);
    let svg = std::fs::read_to_string(dir.path().join("contour.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn contour_diagonal_crossing_within_one_step_of_rv() {
    let dir = tempfile::tempdir().unwrap();
    let steps = 101;
    let max = 0.6;
    let grid = commands::contour(&summary_contour_config(steps, max), dir.path()).unwrap();
    let rv = ovbound::sensitivity::robustness_value(0.8, 3.0f64.sqrt(), 0.0).unwrap();
    let crossing = grid.diagonal_crossing().unwrap();
    assert!((crossing - rv).abs() <= max / (steps - 1) as f64, "{crossing} vs {rv}");
    let svg = std::fs::read_to_string(dir.path().join("contour.svg")).unwrap();
    assert!(svg.contains("stroke-dasharray"), "critical contour drawn");
}

#[test]
fn benchmark_table_and_markers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = AnalysisConfig::load(&data_dir().join("smoke.json")).unwrap();
    cfg.benchmark.as_mut().unwrap().covariates = vec!["x1".into(), "x2".into(), "x3".into()];
    let rows = commands::benchmark(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    let table = csv::Reader::from_path(dir.path().join("benchmark.csv")).unwrap().into_records().count();
    assert_eq!(table, 9);
    commands::contour(&cfg, dir.path()).unwrap();
    let svg = std::fs::read_to_string(dir.path().join("contour.svg")).unwrap();
    assert!(svg.contains("x3 x2"));
}

#[test]
fn benchmark_needs_row_level_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AnalysisConfig::from_json(
        r#"{"data":{"summary":{"theta_s":1,"se":0.1,"scale":1}},"benchmark":{"covariates":["x1"]}}"#,
    )
    .unwrap();
    let e = commands::benchmark(&cfg, dir.path()).unwrap_err();
    assert_eq!(e.kind(), "unsupported");
}

#[test]
fn simulate_writes_one_row_per_replication() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AnalysisConfig::from_json(
        r#"{"data":{"synthetic":{"dgp":"plm_gaussian","n":200,"p":2,"strength":{"type":"r2","cy2":0.05,"cd2":0.05,"rho":1},"seed":3}},
            "engine":{"folds":2},"simulate":{"reps":100,"mode":"oracle"}}"#,
    )
    .unwrap();
    let summary = commands::simulate(&cfg, dir.path()).unwrap();
    assert_eq!(summary.reps, 100);
    let n = csv::Reader::from_path(dir.path().join("coverage.csv")).unwrap().into_records().count();
    assert_eq!(n, 100);
    let v: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("coverage_summary.json")).unwrap()).unwrap();
    assert!(v["coverage_lower"].as_f64().unwrap() > 0.8);
}
