use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use pgcert_core::benchmarks::bundled;
use pgcert_core::constants::{compute_constants, ConstantsSetting, FamilySpec};
use pgcert_core::optimizer::{fosp_horizon, hyperparams_for_fosp};
use pgcert_core::{EstimatorKind, ObjectiveSpec};

fn pgcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgcert"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const EXACT_RUN: &str = r#"{
    "mdp": {"bundled": "random3"},
    "estimator": "gpomdp",
    "batch_size": 1,
    "horizon": 20,
    "iterations": 200,
    "schedule": {"kind": "constant", "eta": 0.05},
    "exact": true
}"#;

const SAMPLED_RUN: &str = r#"{
    "mdp": {"bundled": "chain5"},
    "policy": {"init": "uniform_random", "scale": 0.5, "seed": 3},
    "estimator": "gpomdp",
    "batch_size": 4,
    "horizon": 15,
    "iterations": 40,
    "schedule": {"kind": "constant", "eta": 0.05},
    "seeds": [5, 6]
}"#;

#[test]
fn exact_run_writes_consistent_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", EXACT_RUN);
    let out_dir = dir.path().join("out");
    let out = pgcert(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "run_seed0.jsonl",
        "run_seed0.csv",
        "summary.json",
        "config.resolved.json",
        "meta.json",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let text = fs::read_to_string(out_dir.join("run_seed0.jsonl")).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 201);
    let last = rows.last().unwrap();
    assert!(last["eta"].is_null());
    let summary = read_json(&out_dir.join("summary.json"));
    let run = &summary["runs"][0];
    assert_eq!(run["gap"], last["gap"]);
    assert_eq!(run["final_t"], 200);
    assert_eq!(run["status"], "completed");
    // Exact ascent with a small step never loses value.
    let js: Vec<f64> = rows.iter().map(|r| r["j"].as_f64().unwrap()).collect();
    assert!(js.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    let gap = last["gap"].as_f64().unwrap();
    let j_star = summary["j_star"].as_f64().unwrap();
    assert!((j_star - js[200] - gap).abs() < 1e-12);
}

#[test]
fn log_headers_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", SAMPLED_RUN);
    let out_dir = dir.path().join("out");
    let out = pgcert(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("run_seed5.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "t,eta,j,gap,grad_j_sq,grad_jh_sq,objective,grad_obj_sq,trajectories,env_steps"
    );
    let jsonl = fs::read_to_string(out_dir.join("run_seed6.jsonl")).unwrap();
    let first = jsonl.lines().next().unwrap();
    assert!(first.starts_with("{\"t\":0,\"eta\":0.05,\"j\":"), "{first}");
    let first: Value = serde_json::from_str(first).unwrap();
    assert_eq!(first["trajectories"], 4);
    assert_eq!(first["env_steps"], 60);
    assert_eq!(csv.lines().count(), 42);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", SAMPLED_RUN);
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let out = pgcert(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        first.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echo = first.join("config.resolved.json");
    let out = pgcert(&[
        "run",
        "--config",
        echo.to_str().unwrap(),
        "--output-dir",
        second.to_str().unwrap(),
        "--jobs",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "run_seed5.jsonl",
        "run_seed6.csv",
        "summary.json",
        "config.resolved.json",
    ] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn auto_fields_follow_the_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "auto.json",
        r#"{
            "mdp": {"bundled": "random3"},
            "estimator": "gpomdp",
            "batch_size": "auto",
            "horizon": "auto",
            "iterations": 10,
            "schedule": {"kind": "constant", "eta": "auto"},
            "epsilon": 0.2,
            "delta0": 1.5
        }"#,
    );
    let out = pgcert(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echo: Value = serde_json::from_slice(&out.stdout).unwrap();

    let mdp = bundled("random3").unwrap();
    let h = fosp_horizon(0.2, mdp.gamma()).unwrap();
    let report = compute_constants(&ConstantsSetting {
        family: FamilySpec::SoftmaxTabular {
            num_states: 3,
            num_actions: 2,
        },
        objective: ObjectiveSpec::plain(),
        estimator: EstimatorKind::Gpomdp,
        r_max: mdp.r_max(),
        gamma: mdp.gamma(),
        horizon: h,
        batch_size: 1,
    })
    .unwrap();
    let recipe = hyperparams_for_fosp(&report, 0.2, None, Some(1.5)).unwrap();
    assert_eq!(echo["horizon"], recipe.horizon);
    assert_eq!(echo["batch_size"], recipe.batch_size);
    assert_eq!(
        echo["schedule"]["eta"].as_f64().unwrap().to_bits(),
        recipe.eta.to_bits()
    );
    assert_eq!(echo["schedule"]["kind"], "constant");
    assert!(echo["mdp"]["inline"].is_object());
    // With m = m_max the recipe step is 1/L.
    assert!((recipe.eta * report.L - 1.0).abs() < 1e-12);
}

#[test]
fn auto_without_epsilon_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &EXACT_RUN.replace("\"horizon\": 20", "\"horizon\": \"auto\""),
    );
    let out = pgcert(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epsilon"));
}

#[test]
fn missing_mdp_file_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &EXACT_RUN.replace(r#"{"bundled": "random3"}"#, r#"{"path": "no_such_mdp.json"}"#),
    );
    let out_dir = dir.path().join("out");
    let out = pgcert(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no_such_mdp.json"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn mdp_path_is_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    bundled("chain5").unwrap().save(dir.path().join("chain.json")).unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &EXACT_RUN
            .replace(r#"{"bundled": "random3"}"#, r#"{"path": "chain.json"}"#)
            .replace("200", "5"),
    );
    let out = pgcert(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn schema_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &EXACT_RUN.replace("\"eta\": 0.05", "\"eta\": -1"));
    let out = pgcert(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&out), 2);
    let cfg = write_config(
        dir.path(),
        "d.json",
        &EXACT_RUN.replace("\"batch_size\": 1", "\"batch_size\": \"many\""),
    );
    let out = pgcert(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("batch_size"), "{}", stderr(&out));
}

#[test]
fn constants_command_reports_goldens() {
    let out = pgcert(&["constants", "--actions", "2", "--gamma", "0.9", "--rmax", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["L"].as_f64().unwrap() - 150.0).abs() < 1e-9);
    assert!((v["nu_gpomdp"].as_f64().unwrap() - 500.0).abs() < 1e-9);

    let out = pgcert(&[
        "constants",
        "--objective",
        "entropy",
        "--lambda",
        "0.1",
        "--estimator",
        "gpomdp",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["setting"]["estimator"], "entropy");
    for key in ["lambda", "L", "nu"] {
        assert!(v["entropy"][key].is_number(), "entropy.{key}");
    }

    let out = pgcert(&["constants", "--gamma", "1.0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("discount"));
}

#[test]
fn constants_budget_is_optional() {
    let out = pgcert(&["constants", "--epsilon", "0.1"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["fosp"]["horizon"], 44);
    assert!(v["iteration_budget"]["iterations"].as_f64().unwrap() > 1.0);
    let out = pgcert(&["constants"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.get("fosp").is_none());
}

#[test]
fn verify_suite_passes_on_a_bundled_mdp() {
    let dir = tempfile::tempdir().unwrap();
    let out = pgcert(&[
        "verify",
        "suite",
        "--mdp",
        "random3",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let reports: Vec<Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(reports.len() >= 10);
    assert!(reports.iter().all(|r| r["status"] != "fail"));
    assert!(dir.path().join("verify_suite.json").exists());
}

#[test]
fn verify_detects_mutations() {
    let out = pgcert(&["verify", "unbiasedness", "--mutation", "discount_off_by_one"]);
    assert_eq!(code(&out), 1);
    let reports: Vec<Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(reports.iter().all(|r| r["status"] == "fail"));

    let out = pgcert(&["verify", "mutations"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn verify_refuses_large_enumerations() {
    let out = pgcert(&["verify", "unbiasedness", "--mdp", "random:4x4:1", "--horizon", "20"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Monte-Carlo"), "{}", stderr(&out));
}

#[test]
fn verify_rejects_unknown_checks() {
    let out = pgcert(&["verify", "curvature"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("truncation"));
    let out = pgcert(&["verify", "--list"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 10);
}

const SWEEP: &str = r#"{
    "mdp": {"bundled": "random3"},
    "estimator": "gpomdp",
    "batch_size": 1,
    "horizon": "auto",
    "iterations": "auto",
    "schedule": {"kind": "constant", "eta": "auto"},
    "epsilon": 3.0,
    "sweep": {"axis": "m", "values": [1, 4, 16, 64], "seeds_per_point": 2}
}"#;

#[test]
fn sweep_keeps_sample_budget_flat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.json", SWEEP);
    let out_dir = dir.path().join("sw");
    let out = pgcert(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(out_dir.join("sweep_aggregate.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[..4], ["axis", "value", "n", "gap_mean"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let steps: Vec<f64> = rows.iter().map(|r| r[7].parse().unwrap()).collect();
    // T = ceil(c / m) keeps T m H within one batch of constant.
    for (s, m) in steps.iter().zip([1.0, 4.0, 16.0, 64.0]) {
        assert!((s - steps[0]).abs() <= m, "{steps:?}");
    }
    let points = fs::read_to_string(out_dir.join("sweep_points.csv")).unwrap();
    assert_eq!(points.lines().count(), 9);
}

#[test]
fn sweep_range_errors_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.json", &SWEEP.replace("64]", "100000]"));
    let out_dir = dir.path().join("sw");
    let out = pgcert(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("admissible range"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn single_point_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = SAMPLED_RUN.replace(
        "\"seeds\": [5, 6]",
        "\"seeds\": [5], \"sweep\": {\"axis\": \"eta\", \"values\": [0.05]}",
    );
    let cfg = write_config(dir.path(), "sweep.json", &sweep);
    let sw = dir.path().join("sw");
    let out = pgcert(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        sw.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run_cfg = write_config(dir.path(), "run.json", SAMPLED_RUN);
    let run = dir.path().join("run");
    let out = pgcert(&[
        "run",
        "--config",
        run_cfg.to_str().unwrap(),
        "--output-dir",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let summary = read_json(&run.join("summary.json"));
    let mut rdr = csv::Reader::from_path(sw.join("sweep_points.csv")).unwrap();
    let row = rdr.records().next().unwrap().unwrap();
    assert_eq!(&row[2], "5");
    let gap: f64 = row[9].parse().unwrap();
    assert_eq!(gap.to_bits(), summary["runs"][0]["gap"].as_f64().unwrap().to_bits());
}
