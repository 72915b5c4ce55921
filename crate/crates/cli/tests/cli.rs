use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynodisco(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynodisco"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("DYNODISCO_LOG", "error")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

/// A small Lotka-Volterra run that trains in well under a second.
const SMALL: &str = r#"{
  "system": "lotka-volterra",
  "dataset": {"train_envs": 3, "train": {"trajectories": 2}, "test": {"trajectories": 2}},
  "hyper": {"outer_iters": 5, "derivative_scheme": "fourth_order", "init_thresholds": [0.1, 0.2]},
  "timing": false
}"#;

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_byte_identical_and_lists_nine_linear_environments() {
    let a = tempfile::tempdir().unwrap();
    assert!(dynodisco(&["generate", "--system", "linear", "--seed", "0"], a.path()).status.success());
    let first = read_tree(a.path());
    assert!(dynodisco(&["generate", "--system", "linear", "--seed", "0"], a.path()).status.success());
    assert_eq!(first, read_tree(a.path()));

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("dataset/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"].as_array().unwrap().len(), 9);
    assert_eq!(manifest["seed"], 0);
    let config: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("dataset/config.json")).unwrap()).unwrap();
    assert_eq!(config["library"]["degree"], 5);
    assert_eq!(config["dataset"]["train_envs"], 9);
    assert!(config["hyper"]["alpha_xi"].is_number());
}

#[test]
fn invalid_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dynodisco(&["generate", "--system", "pendulum-on-a-cart"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown system"));

    let cfg = write_config(dir.path(), "bad.json", r#"{"system": "linear", "learning_rate": 1}"#);
    let out = dynodisco(&["generate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = dynodisco(&["generate"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let cfg = write_config(dir.path(), "empty.json", r#"{"system": "linear", "sweep": {"variances": []}}"#);
    assert_eq!(dynodisco(&["sweep", "variance", "--config", &cfg], dir.path()).status.code(), Some(2));
    let cfg = write_config(dir.path(), "empty_h.json", r#"{"system": "linear", "sweep": {"horizons": []}}"#);
    assert_eq!(dynodisco(&["sweep", "horizon", "--config", &cfg], dir.path()).status.code(), Some(2));
}

#[test]
fn train_and_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let run = dir.path().join("run");
    assert!(dynodisco(&["generate", "--config", &cfg], &run).status.success());

    assert!(dynodisco(&["train", "--config", &cfg], &run).status.success());
    let loss_csv = fs::read_to_string(run.join("spreme/train_loss.csv")).unwrap();
    assert_eq!(loss_csv.lines().count(), 1 + 5);
    assert!(dynodisco(&["train", "--config", &cfg], &run).status.success());
    assert_eq!(fs::read_to_string(run.join("spreme/train_loss.csv")).unwrap(), loss_csv);

    assert!(dynodisco(&["train", "--config", &cfg, "--method", "sindy"], &run).status.success());
    assert!(run.join("sindy/model.json").is_file());
    assert!(!run.join("sindy/train_loss.csv").exists());

    let out = dynodisco(&["evaluate", "--config", &cfg, "--mode", "out-of-domain"], &run);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(run.join("spreme/report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("lotka-volterra,spreme,out-of-domain,"));
    let fields: Vec<&str> = rows[0].split(',').collect();
    assert_ne!(fields[6], "-");
    assert_ne!(fields[7], "-");
    assert_eq!(fields[8], "-");

    assert!(dynodisco(&["evaluate", "--config", &cfg, "--method", "sindy"], &run).status.success());
    let report = fs::read_to_string(run.join("sindy/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(run.join("sindy/predictions/in-domain_env00_traj00.csv").is_file());

    assert!(dynodisco(&["adapt", "--config", &cfg], &run).status.success());
    let adapted: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("spreme/adapted.json")).unwrap()).unwrap();
    assert_eq!(adapted["environments"].as_array().unwrap().len(), 1);
    assert_eq!(adapted["terms"].as_array().unwrap().len(), 21);

    let out = dynodisco(&["report"], &run);
    assert!(out.status.success());
    let merged = fs::read_to_string(run.join("report.csv")).unwrap();
    let methods: Vec<&str> = merged.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(methods, ["spreme", "sindy", "sindy"]);
}

#[test]
fn library_mismatch_is_a_compatibility_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let small_lib = write_config(
        dir.path(),
        "deg2.json",
        &SMALL.replace(r#""timing": false"#, r#""timing": false, "library": {"degree": 2}"#),
    );
    assert!(dynodisco(&["generate", "--config", &cfg], dir.path()).status.success());
    assert!(dynodisco(&["train", "--config", &small_lib, "--method", "sindy-union"], dir.path()).status.success());
    let out = dynodisco(&["evaluate", "--config", &cfg, "--method", "sindy-union"], dir.path());
    assert_eq!(out.status.code(), Some(4));

    let other = write_config(dir.path(), "lin.json", &SMALL.replace("lotka-volterra", "linear"));
    let out = dynodisco(&["train", "--config", &other], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn training_failure_exits_with_training_code() {
    let dir = tempfile::tempdir().unwrap();
    // Too few training points for the five-point stencil.
    let cfg = write_config(
        dir.path(),
        "short.json",
        r#"{"system": "lotka-volterra", "dataset": {"train": {"horizon": 0.9}},
            "hyper": {"derivative_scheme": "fourth_order"}}"#,
    );
    assert!(dynodisco(&["generate", "--config", &cfg], dir.path()).status.success());
    let out = dynodisco(&["train", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("training failed"));
}

#[test]
fn sweeps_write_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        &SMALL.replace(
            r#""timing": false"#,
            r#""timing": false, "sweep": {"methods": ["sindy-intersection", "sindy-union"], "horizons": [1, "full"]}"#,
        ),
    );
    assert!(dynodisco(&["sweep", "variance", "--config", &cfg, "--jobs", "2"], dir.path()).status.success());
    let csv = fs::read_to_string(dir.path().join("sweep-variance/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let again = dynodisco(&["sweep", "variance", "--config", &cfg], dir.path());
    assert!(again.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("sweep-variance/sweep.csv")).unwrap(), csv);

    assert!(dynodisco(&["sweep", "horizon", "--config", &cfg], dir.path()).status.success());
    let csv = fs::read_to_string(dir.path().join("sweep-horizon/sweep.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("train_seconds"));
    let etas: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(etas, ["1", "full"]);
}
