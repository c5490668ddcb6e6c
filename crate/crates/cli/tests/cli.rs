use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curvequiv"))
        .args(args)
        .current_dir(root())
        .output()
        .unwrap()
}

fn case_study() -> Value {
    serde_json::from_str(&std::fs::read_to_string(root().join("configs/case_study.json")).unwrap())
        .unwrap()
}

fn write_config(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

const DATA: &str = "data/ibs_layout.csv";

#[test]
fn fit_reports_three_curves() {
    let out = run(&["fit", "--config", "configs/case_study.json", "--data", DATA]);
    let v = stdout_json(&out);
    assert_eq!(v["subgroups"].as_array().unwrap().len(), 3);
    assert_eq!(v["curves"]["subgroups"].as_array().unwrap().len(), 3);
    assert_eq!(v["curves"]["dose"].as_array().unwrap().len(), 101);
    let e = &v["subgroups"][2];
    assert_eq!(e["label"], "E");
    assert!((e["params"]["emax"].as_f64().unwrap() - 0.90).abs() < 1e-6);
    assert!((e["sigma2"].as_f64().unwrap() - 0.72).abs() < 1e-6);
}

#[test]
fn minimal_config_fits() {
    let dir = tempfile::tempdir().unwrap();
    let config = json!({
        "schema_version": 1,
        "design": {"doses": [0, 1, 2, 3, 4], "weights": [0.142857142857, 0.428571428571, 0.428571428571]},
        "models": [
            {"family": "emax_fixed_hill", "hill": 1},
            {"family": "emax_fixed_hill", "hill": 1},
            {"family": "emax_fixed_hill", "hill": 1}
        ]
    });
    let path = write_config(dir.path(), "min.json", &config);
    let out_file = dir.path().join("fit.json");
    let out = run(&[
        "fit",
        "--config",
        &path,
        "--data",
        DATA,
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(out_file).unwrap();
    assert!(text.ends_with("}\n"));
}

#[test]
fn malformed_config_is_a_usage_error_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        "{\n  \"schema_version\": 1,\n  \"design\": {\"doses\": [0, 1,, 2]}\n}\n",
    )
    .unwrap();
    let out = run(&["fit", "--config", path.to_str().unwrap(), "--data", DATA]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("column 29"), "{err}");
}

#[test]
fn unknown_keys_and_versions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = case_study();
    config["test"]["deltas"] = json!(0.3);
    let path = write_config(dir.path(), "typo.json", &config);
    let out = run(&["test", "--config", &path, "--data", DATA]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("deltas"));

    let mut config = case_study();
    config["schema_version"] = json!(7);
    let path = write_config(dir.path(), "version.json", &config);
    assert_eq!(
        run(&["fit", "--config", &path, "--data", DATA])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(
        run(&["fit", "--config", "configs/case_study.json"])
            .status
            .code(),
        Some(2)
    );
    let out = run(&[
        "fit",
        "--config",
        "configs/case_study.json",
        "--data",
        DATA,
        "--workers",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let help = run(&["--help"]);
    assert!(String::from_utf8_lossy(&help.stdout).contains("Exit codes"));
}

#[test]
fn data_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "fit",
        "--config",
        "configs/case_study.json",
        "--data",
        "no/such/file.csv",
    ]);
    assert_eq!(out.status.code(), Some(3));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "subgroup,dose,response\n1,0,0.1\n1,0.5,oops\n").unwrap();
    let out = run(&[
        "fit",
        "--config",
        "configs/case_study.json",
        "--data",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let off_design = dir.path().join("dose.csv");
    std::fs::write(&off_design, "subgroup,dose,response\n1,0,0.1\n1,7,0.2\n").unwrap();
    let out = run(&[
        "fit",
        "--config",
        "configs/case_study.json",
        "--data",
        off_design.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

fn test_with(dir: &Path, name: &str, target: Value, b: usize) -> Value {
    let mut config = case_study();
    config["test"]["target"] = target;
    config["test"]["B"] = json!(b);
    let path = write_config(dir, name, &config);
    stdout_json(&run(&["test", "--config", &path, "--data", DATA]))
}

#[test]
fn all_subgroup_statistic_is_the_largest_single_one() {
    let dir = tempfile::tempdir().unwrap();
    let singles: Vec<f64> = (1..=3)
        .map(|l| {
            test_with(dir.path(), &format!("s{l}.json"), json!(l), 2)["result"]["statistic"]
                .as_f64()
                .unwrap()
        })
        .collect();
    let all = test_with(dir.path(), "all.json", json!("all"), 2)["result"]["statistic"]
        .as_f64()
        .unwrap();
    let max = singles.iter().copied().fold(f64::MIN, f64::max);
    assert_eq!(all, max);
    assert!((singles[0] - 0.3386).abs() < 1e-3);
}

#[test]
fn single_replicate_gives_degenerate_p_value() {
    let dir = tempfile::tempdir().unwrap();
    let v = test_with(dir.path(), "one.json", json!(3), 1);
    let p = v["result"]["p_value"].as_f64().unwrap();
    assert!(p == 0.0 || p == 1.0, "{p}");
}

#[test]
fn intersection_union_reports_components() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = case_study();
    config["test"]["target"] = json!([2, 3]);
    config["test"]["B"] = json!(20);
    config["test"]["method"] = json!("intersection_union");
    let path = write_config(dir.path(), "iu.json", &config);
    let v = stdout_json(&run(&["test", "--config", &path, "--data", DATA]));
    let components = v["components"].as_array().unwrap();
    assert_eq!(components.len(), 2);
    let max_p = components
        .iter()
        .map(|c| c["p_value"].as_f64().unwrap())
        .fold(0.0, f64::max);
    assert_eq!(v["p_value"].as_f64().unwrap(), max_p);
}

fn calibrate_with(dir: &Path, grid: Value) -> (Vec<Vec<String>>, Value) {
    let mut config = case_study();
    config["calibrate"]["B"] = json!(50);
    config["calibrate"]["target"] = json!(3);
    config["calibrate"]["grid"] = grid;
    let path = write_config(dir, "cal.json", &config);
    let out = dir.join("curve.csv");
    let res = run(&[
        "calibrate",
        "--config",
        &path,
        "--data",
        DATA,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    let summary =
        serde_json::from_str(&std::fs::read_to_string(dir.join("curve.summary.json")).unwrap())
            .unwrap();
    (rows, summary)
}

#[test]
fn calibration_far_above_the_statistic_rejects_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, summary) = calibrate_with(dir.path(), json!([2.0, 3.0, 5.0]));
    assert!(rows.iter().all(|r| r[3] == "true"), "{rows:?}");
    assert_eq!(summary["delta_hat"].as_f64(), Some(2.0));
}

#[test]
fn calibration_below_the_statistic_has_constant_p_value() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, _) = calibrate_with(dir.path(), json!([0.01, 0.02, 0.04]));
    assert!(rows.iter().all(|r| r[4] == "false"));
    assert!(
        rows.windows(2)
            .all(|w| w[0][1] == w[1][1] && w[0][2] == w[1][2]),
        "{rows:?}"
    );
}

#[test]
fn calibration_range_grid_has_clean_values() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, _) = calibrate_with(dir.path(), json!({"from": 0.05, "to": 0.5, "points": 10}));
    let deltas: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        deltas,
        ["0.05", "0.1", "0.15", "0.2", "0.25", "0.3", "0.35", "0.4", "0.45", "0.5"]
    );
}

#[test]
fn asymp_scenario_has_a_single_extremal_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut config: Value = serde_json::from_str(
        &std::fs::read_to_string(root().join("configs/asymp_scenario_a.json")).unwrap(),
    )
    .unwrap();
    config["asymp"]["samples"] = json!(2000);
    let path = write_config(dir.path(), "asymp.json", &config);
    let v = stdout_json(&run(&["asymp", "--config", &path]));
    assert_eq!(v["extremal"].as_array().unwrap().len(), 1);
    assert_eq!(v["multiple_extremal"], json!(false));
}

#[test]
fn simulate_writes_one_row_per_selected_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut config: Value = serde_json::from_str(
        &std::fs::read_to_string(root().join("scenarios/A_fixed_hill.json")).unwrap(),
    )
    .unwrap();
    config["simulate"]["options"]["nsim"] = json!(4);
    config["simulate"]["options"]["B"] = json!(10);
    config["simulate"]["rows"] = json!([1, 8]);
    let path = write_config(dir.path(), "sim.json", &config);
    let out = dir.path().join("sim.json.out.json");
    let res = run(&[
        "simulate",
        "--config",
        &path,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["nsim"] == json!(4)));
}
