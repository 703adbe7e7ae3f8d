use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn securelat(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_securelat"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SECURELAT_SEED")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const METRIC_KEYS: [&str; 22] = [
    "avg_transmission_interval_s",
    "bandwidth_utilization_pct",
    "compensation_effectiveness_pct",
    "detection_time_s",
    "eig_max_magnitude",
    "estimation_accuracy",
    "estimation_rmse",
    "fn_rate_pct",
    "fp_rate_pct",
    "heading_rmse_rad",
    "lateral_rmse_m",
    "max_estimation_error",
    "max_heading_rad",
    "max_lateral_m",
    "mean_release_interval_s",
    "observer_convergence_s",
    "residual_effect_pct",
    "settling_time_s",
    "sliding_convergence_rate",
    "sliding_max_deviation",
    "stability_margin",
    "transmission_ratio_pct",
];

#[test]
fn gen_data_default_rows_and_header() {
    let d = tempfile::tempdir().unwrap();
    let out = securelat(&["gen-data"], d.path());
    assert!(out.status.success());
    let text = fs::read_to_string(d.path().join("dataset.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,e_d,e_d_dot,e_phi,e_phi_dot,u");
    assert_eq!(lines.count(), 5000);
    let m = json(&d.path().join("manifest.json"));
    assert_eq!(m["persistency"]["passed"], Value::Bool(true));
    assert_eq!(m["emitted_files"], serde_json::json!(["dataset.csv"]));
}

#[test]
fn gen_data_short_and_zero_excitation() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[plant]\ndata_duration_s = 1.0\nexcitation = \"zero\"\n");
    assert!(securelat(&["gen-data", "--config", &cfg], d.path()).status.success());
    let text = fs::read_to_string(d.path().join("dataset.csv")).unwrap();
    assert_eq!(text.lines().count(), 101);
    let m = json(&d.path().join("manifest.json"));
    assert_eq!(m["persistency"]["passed"], Value::Bool(false));
}

#[test]
fn continuous_source_generates_data() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[plant]\ndata_source = \"continuous\"\ndata_duration_s = 2.0\nexcitation_amplitude = 0.01\n");
    assert!(securelat(&["gen-data", "--config", &cfg], d.path()).status.success());
    assert_eq!(fs::read_to_string(d.path().join("dataset.csv")).unwrap().lines().count(), 201);
}

#[test]
fn round_trip_gen_identify_simulate() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[plant]\nmodel = \"model.json\"\n[sim]\nduration_s = 12.0\n");
    assert!(securelat(&["gen-data"], d.path()).status.success());
    let out = securelat(&["identify", "--trunc", "auto"], d.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = json(&d.path().join("model.json"));
    assert_eq!(keys(&model), ["A", "B", "persistency", "r", "residual_fro", "sample_period_s"]);
    assert!(model["r"].as_u64().is_some());
    let nominal = [
        [0.999, 0.01, 0.0, 0.0],
        [-0.05, 0.99, 0.05, 0.0],
        [0.0, 0.0, 0.999, 0.01],
        [-0.01, 0.0, -0.08, 0.995],
    ];
    let mut err = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            err += (model["A"][i][j].as_f64().unwrap() - nominal[i][j]).powi(2);
        }
    }
    assert!(err.sqrt() < 1e-8, "A error {}", err.sqrt());
    let out = securelat(&["simulate", "--config", &cfg, "--scenario", "case1"], d.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.path().join("trace_case1.csv").exists());
}

#[test]
fn identify_rejects_bad_datasets() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("dataset.csv"), "t,e_d,e_d_dot,e_phi,e_phi_dot,u\n0,1,0,0,0,0\n").unwrap();
    let out = securelat(&["identify"], d.path());
    assert_eq!(out.status.code(), Some(1));
    fs::write(d.path().join("dataset.csv"), "t,e_d,e_d_dot,e_phi,e_phi_dot,u\n0,1,0,0,0,0\n0.01,1,x,0,0,0\n").unwrap();
    let out = securelat(&["identify"], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    let out = securelat(&["identify", "--trunc", "zero"], d.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_all_schema() {
    let d = tempfile::tempdir().unwrap();
    let out = securelat(&["simulate", "--scenario", "all", "--seed", "3"], d.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for case in ["case1", "case2", "case3"] {
        assert_eq!(
            first_line(&d.path().join(format!("trace_{case}.csv"))),
            "t,e_d,e_d_dot,e_phi,e_phi_dot,u,alpha_att,alpha_hat,S,triggered,delay_steps,V_lkf"
        );
        let m = json(&d.path().join(format!("metrics_{case}.json")));
        assert_eq!(keys(&m), METRIC_KEYS);
        let rows = fs::read_to_string(d.path().join(format!("trace_{case}.csv"))).unwrap().lines().count();
        assert_eq!(rows, 2002);
    }
    let m1 = json(&d.path().join("metrics_case1.json"));
    let m3 = json(&d.path().join("metrics_case3.json"));
    for k in ["estimation_accuracy", "estimation_rmse", "detection_time_s", "fp_rate_pct", "fn_rate_pct"] {
        assert!(m1[k].is_null(), "{k} should be absent for case1");
        assert!(m3[k].is_number(), "{k} should be present for case3");
    }
    assert!(m3["compensation_effectiveness_pct"].is_number());
    let manifest = json(&d.path().join("manifest.json"));
    let listed: Vec<String> = manifest["emitted_files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    for f in ["comparison.json", "states.svg", "control.svg", "sliding.svg", "release_intervals.svg"] {
        assert!(listed.contains(&f.to_string()), "{f} missing from manifest");
    }
    for f in &listed {
        assert!(d.path().join(f).exists());
    }
    assert_eq!(manifest["seed"], 3);
    assert_eq!(
        keys(&manifest),
        ["command", "config_path", "emitted_files", "output_dir", "seed", "tool_version"]
    );
    assert!(!d.path().join(".manifest.json.partial").exists());
}

#[test]
fn seed_from_environment_and_emit_filter() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_securelat"))
        .args(["simulate", "--scenario", "case2", "--emit", "json", "--out"])
        .arg(d.path())
        .env("SECURELAT_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json(&d.path().join("manifest.json"))["seed"], 77);
    assert!(d.path().join("metrics_case2.json").exists());
    assert!(!d.path().join("trace_case2.csv").exists());
    assert!(!d.path().join("states.svg").exists());
    assert_eq!(securelat(&["simulate", "--emit", "pdf"], d.path()).status.code(), Some(2));
}

#[test]
fn config_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[sim]\nduration_s = \n");
    let out = securelat(&["simulate", "--config", &cfg], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    let cfg = write_config(d.path(), "[control]\nkappa = 1.5\n");
    assert_eq!(securelat(&["simulate", "--config", &cfg], d.path()).status.code(), Some(2));
    assert_eq!(securelat(&["verify", "--config", "/nonexistent/cfg.toml"], d.path()).status.code(), Some(2));
    assert_eq!(securelat(&["simulate", "--scenario", "case9"], d.path()).status.code(), Some(2));
}

#[test]
fn blow_up_exits_one_with_partial_trace() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[control]\ngain_k = [50.0, 50.0, 50.0, 50.0]\n");
    let out = securelat(&["simulate", "--config", &cfg, "--scenario", "case1"], d.path());
    assert_eq!(out.status.code(), Some(1));
    let manifest = json(&d.path().join("manifest.json"));
    assert!(manifest["error"].as_str().unwrap().contains("blow-up"));
    let rows = fs::read_to_string(d.path().join("trace_case1.csv")).unwrap().lines().count();
    assert!(rows > 1 && rows < 2002);
}

#[test]
fn verify_reports_without_failing() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[sim]\nsearch_iterations = 200\n");
    let out = securelat(&["verify", "--config", &cfg], d.path());
    assert_eq!(out.status.code(), Some(0));
    let c = json(&d.path().join("certificate.json"));
    assert!(c["xi"].is_number());
    assert!(c["closed_loop_spectral_radius"].is_number());
    assert!(c["feasible"].is_boolean());

    let cfg = write_config(
        d.path(),
        "[plant]\na = [[1.2, 0.0], [0.0, 1.1]]\nb = [[0.0], [0.0]]\n[control]\nsurface_q = [1.0, 1.0]\ngain_q = [1.0, 1.0]\n[sim]\nsearch_iterations = 200\n",
    );
    let out = securelat(&["verify", "--config", &cfg], d.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let c = json(&d.path().join("certificate.json"));
    assert_eq!(c["feasible"], Value::Bool(false));
}

#[test]
fn verify_scalar_certificate() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "[plant]\na = [[0.5]]\nb = [[1.0]]\n[control]\nsurface_q = [1.0]\ngain_q = [1.0]\n[trigger]\nmu = 0.1\ndelay_bound_s = 0.01\n",
    );
    let out = securelat(&["verify", "--config", &cfg], d.path());
    assert!(out.status.success());
    let c = json(&d.path().join("certificate.json"));
    assert_eq!(c["feasible"], Value::Bool(true));
    assert!(c["max_eigenvalue"].as_f64().unwrap() < 0.0);
    assert!(c["closed_loop_spectral_radius"].as_f64().unwrap() < 1.0);
}
