use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fprom(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fprom"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FPROM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace()
        .chain(text.lines())
        .find_map(|w| w.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

const DENSITY_RUN: &str = r#"
seed = 5

[input]
mode = "densities"
path = "oracle/manifest.csv"

[grid]
x_min = -10.0
x_max = 20.0
n_points = 257

[split]
train_end = 2.0

[calibration]
budget = 200
bounds = [[0.0, 2.0], [0.01, 2.0]]
"#;

#[test]
fn oracle_calibrate_predict_validate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = fprom(&["oracle", "--family", "f3", "--drift", "1", "--diffusion", "0.5", "--times", "1,1.5,2,2.5,3", "--grid", "-10,20,257", "--out", "oracle"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(d.join("run.toml"), DENSITY_RUN).unwrap();

    let out = fprom(&["calibrate", "--config", "run.toml", "--out", "model"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout(&out);
    assert_eq!(field(&report, "method"), "loss_minimization");
    let artifact = d.join("model/artifact.json");
    assert!(artifact.exists() && d.join("model/train_report.txt").exists());

    let out = fprom(&["predict", "--artifact", "model/artifact.json", "--horizon", "3", "--every", "0.5", "--out", "pred"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(field(&stdout(&out), "densities"), "4");
    let manifest = fs::read_to_string(d.join("pred/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);

    let out = fprom(&["validate", "--artifact", "model/artifact.json", "--config", "run.toml", "--out", "val"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let kl: f64 = field(&stdout(&out), "kl").parse().unwrap();
    assert!(kl < 1e-3, "{kl}");
    assert!(fs::read_to_string(d.join("val/metrics.csv")).unwrap().starts_with("time,kl,l1\n"));
}

#[test]
fn simulate_then_train_uses_the_environment_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("sim.toml"),
        "[sde]\ndrift = { kind = \"constant\", mu = 1.0 }\nnoise = { kind = \"constant\", sigma = 1.0 }\n\n[plan]\nn_trajectories = 2000\ndt = 0.01\nhorizon = 1.0\nstride = 10\nseed = 3\nt_start = 1.0\ninitial = { kind = \"normal\", mean = 1.0, sd = 1.0 }\n",
    )
    .unwrap();
    let out = fprom(&["simulate", "--config", "sim.toml", "--out", "ens.csv"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(
        d.join("run.toml"),
        "seed = 1\n[input]\nmode = \"ensemble\"\npath = \"ens.csv\"\n[grid]\nx_min = -10.0\nx_max = 20.0\nn_points = 257\n[split]\ntrain_end = 1.6\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fprom"))
        .args(["train", "--config", "run.toml"])
        .current_dir(d)
        .env("FPROM_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("from-env/artifact.json").exists());
}

#[test]
fn input_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = fprom(&["train", "--config", "missing.toml"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));

    fs::write(d.join("bad.toml"), "seed = 1\n[input\n").unwrap();
    let out = fprom(&["train", "--config", "bad.toml"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml:2"));
}

#[test]
fn infeasible_configs_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let no_bounds = DENSITY_RUN.replace("bounds = [[0.0, 2.0], [0.01, 2.0]]", "");
    fs::write(d.join("run.toml"), no_bounds).unwrap();
    assert_eq!(code(&fprom(&["calibrate", "--config", "run.toml"], d)), 4);
}

fn negative_artifact(d: &Path, diffusion: f64) {
    let out = fprom(&["oracle", "--family", "f1", "--diffusion", "0.5", "--times", "1", "--grid", "-8,8,161", "--out", "o"], d);
    assert_eq!(code(&out), 0);
    let values: Vec<String> = fs::read_to_string(d.join("o/oracle_000.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect();
    let json = format!(
        r#"{{
  "format_version": 1,
  "grid": {{ "x_min": -8.0, "x_max": 8.0, "n_points": 161 }},
  "model": {{ "drift": [0.0], "diffusion": [{diffusion}] }},
  "transform": "identity",
  "initial_time": 1.0,
  "initial": [{}],
  "training_window": [1.0, 2.0],
  "solver": {{ "integrator": "crank_nicolson", "dt": 0.01, "boundary": "zero_flux", "accuracy_order": 2, "allow_negative_diffusion": false }},
  "metadata": {{ "method": "moment_regression", "loss": 0.0, "seed": 0, "tool_version": "0" }}
}}"#,
        values.join(", ")
    );
    fs::write(d.join("neg.json"), json).unwrap();
}

#[test]
fn negative_diffusion_exits_with_4_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    negative_artifact(d, -0.01);
    let out = fprom(&["predict", "--artifact", "neg.json", "--times", "2.5", "--out", "p"], d);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("allow_negative_diffusion"));
    let out = fprom(&["predict", "--artifact", "neg.json", "--times", "2.5", "--allow-negative-diffusion", "--out", "p"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    negative_artifact(d, -5.0);
    let out = fprom(&["predict", "--artifact", "neg.json", "--times", "50", "--allow-negative-diffusion", "--out", "p"], d);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
