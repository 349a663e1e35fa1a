use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn metalinreg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metalinreg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn write_json(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec(value).unwrap()).unwrap();
    path.display().to_string()
}

fn complexity(alpha: f64) -> Value {
    json!({"complexity": {
        "constants": {"delta": 1.0, "lipschitz_l": 1.0, "smooth_mu": 1.0, "hessian_lip": 0.0,
                      "grad_var_data": 1.0, "grad_var_task": 1.0, "hess_var": 0.0},
        "lambda_drs": 1.0,
        "lambda_maml": 1.0,
        "schedule": {"t_train": 1, "t_test": 1, "m": 1, "n": 1, "d_hessian": 1,
                     "lr_train": 0.0, "lr_test": 0.0, "alpha": alpha}
    }})
}

#[test]
fn welch_with_equal_means_is_even_odds() {
    let dir = tempfile::tempdir().unwrap();
    let out = metalinreg(
        &["welch", "--mean-a", "-1.5", "--var-a", "2", "--n-a", "5", "--mean-b", "-1.5", "--var-b", "2", "--n-b", "5"],
        dir.path(),
    );
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["p"], 0.5);
    assert_eq!(v["t"], 0.0);
    assert_eq!(v["dof"], 8.0);
    assert_eq!(v["config"]["mean_a"], -1.5);
}

#[test]
fn bounds_report_unit_constants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "b.json", &complexity(0.0));
    let out = metalinreg(&["bounds", "--config", &cfg], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["complexity"]["drs"]["c_tr"], 2.5);
    assert_eq!(v["complexity"]["drs"]["c_te"], 2.0);
    assert_eq!(v["complexity"]["maml"]["bias_term"], 0.0);
    assert_eq!(v["complexity"]["maml"]["c_te"], 2.0);
}

#[test]
fn violated_step_size_exits_with_assumption_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "b.json", &complexity(0.5));
    let out = metalinreg(&["bounds", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_json(&out);
    assert_eq!(e["error"]["code"], "assumption_violation");
    assert_eq!(e["error"]["module"], "bounds");
    assert!(out.stdout.is_empty());
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = metalinreg(&["contour", "--speed", "3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["code"], "usage");

    let cfg = write_json(dir.path(), "c.json", &json!({"reps": 3, "colour": "red"}));
    let out = metalinreg(&["contour", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let e = stderr_json(&out);
    assert_eq!(e["error"]["code"], "invalid_config");
    assert!(e["error"]["message"].as_str().unwrap().contains("colour"));

    let out = metalinreg(&["contour", "--config", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = metalinreg(&["--help"], dir.path());
    assert!(out.status.success());
    assert!(!out.stdout.is_empty());
}

#[test]
fn contour_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "contour", "--m-values", "2,4", "--n-values", "3", "--alpha-values", "0,0.5", "--reps", "10", "--mc-tasks", "200",
        "--seed", "3", "--out", "grid.csv",
    ];
    let out = metalinreg(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "m,n,alpha,reps,p_pre,p_post,stderr_pre,stderr_post,degenerate");
    assert_eq!(lines.len(), 1 + 2 * 2);
    // At α = 0 the pre and post columns agree.
    for row in lines[1..].iter().map(|l| l.split(',').collect::<Vec<_>>()) {
        if row[2] == "0" || row[2] == "0.0" {
            assert_eq!(row[4], row[5]);
        }
    }
    let meta: Value = serde_json::from_slice(&std::fs::read(dir.path().join("grid.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["reps"], 10);
    assert_eq!(meta["config"]["seed"], 3);
}

#[test]
fn generated_data_feeds_the_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let out = metalinreg(&["gen-data", "--m", "4", "--n", "5", "--p", "2", "--seed", "1", "--out", "data.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = metalinreg(&["estimate", "--data", "data.json", "--alpha", "0.25"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["drs"]["theta_hat"].as_array().unwrap().len(), 2);
    assert_eq!(v["maml"]["theta_hat"].as_array().unwrap().len(), 2);
    assert_eq!(v["config"]["alpha"], 0.25);
}

#[test]
fn sgd_verify_reports_the_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "method": "drs",
        "distribution": {"finite": {"tasks": [
            {"theta": [1.0], "noise_var": 0.1, "q": [[1.0]]},
            {"theta": [-1.0], "noise_var": 0.2, "q": [[0.5]]}
        ]}},
        "oracle": {"grad_var_data": 0.5, "hess_var": 0.0, "domain_radius": 3.0},
        "schedule": {"t_train": 20, "t_test": 10, "m": 2, "n": 2, "d_hessian": 1,
                     "lr_train": 0.1, "lr_test": 0.1, "alpha": 0.0},
        "seeds": 8
    });
    let path = write_json(dir.path(), "s.json", &cfg);
    let out = metalinreg(&["sgd-verify", "--config", &path], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["satisfied"], true);
    assert!(v["lhs_mean"].as_f64().unwrap() <= v["rhs"].as_f64().unwrap());
    assert_eq!(v["domain_radius"], 3.0);
}

#[test]
fn failed_runs_leave_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "b.json", &complexity(0.5));
    let out = metalinreg(&["bounds", "--config", &cfg, "--out", "report.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("report.json").exists());

    let out = metalinreg(&["welch", "--mean-a", "0", "--var-a", "1", "--n-a", "3", "--mean-b", "1", "--var-b", "1", "--n-b", "3", "--out", "no/such/dir/w.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["code"], "usage");
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 1, "{leftovers:?}");
}
