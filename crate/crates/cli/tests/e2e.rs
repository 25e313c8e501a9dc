//! End-to-end pipeline tests against the compiled binary: byte-level
//! determinism of the simulate -> fit -> predict -> evaluate chain
//! (acceptance criterion 13) and the documented exit codes.

use std::path::Path;
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_ibnrcox")
}

fn write_config(dir: &Path, model: &str, extra_fit: &str) -> std::path::PathBuf {
    let data = dir.join("data");
    let config = format!(
        r#"
[simulate]
out_dir = "{data}"
m = 60
periods = 18
d_max = 2
granularity = "monthly"
start_date = "2014-01-01"
seed = 9
pi1 = [0.6, 0.4]
gamma = [[0.9, 0.1], [0.2, 0.8]]
theta = [[-1.8, 0.2, 0.4, 0.1], [-0.6, 0.2, 0.4, 0.1]]
covariates = true
exposure = "full"

[simulate.delay]
kind = "dirichlet"
eta = [5.0, 1.6, 0.9]

[fit]
data_dir = "{data}"
periods = 18
d_max = 2
granularity = "monthly"
start_date = "2014-01-01"
model = "{model}"
g = 2
seed = 5
out = "{out}/model.json"
trace_out = "{out}/trace.csv"
max_iterations = 40
rel_distance_threshold = 1e-3
mc_samples = 50

[predict]
data_dir = "{data}"
periods = 18
d_max = 2
granularity = "monthly"
start_date = "2014-01-01"
model = "{out}/model.json"
dates = ["2015-04-01", "2015-05-01", "2015-06-01"]
n_sims = 400
seed = 3
out = "{out}/results.json"
plot_out = "{out}/plot.csv"
truth = "{data}/truth.json"

[evaluate]
results = ["{out}/results.json"]
out = "{out}/comparison.csv"
{extra_fit}"#,
        data = data.display(),
        out = dir.display(),
        model = model,
        extra_fit = extra_fit,
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn run_pipeline(dir: &Path, model: &str) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let config = write_config(dir, model, "");
    for (cmd, extra) in [
        ("simulate", vec![]),
        ("fit", vec!["--allow-nonconverged"]),
        ("predict", vec![]),
        ("evaluate", vec![]),
    ] {
        let output = Command::new(binary())
            .arg(cmd)
            .arg("--config")
            .arg(&config)
            .args(&extra)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    (
        std::fs::read(dir.join("model.json")).unwrap(),
        std::fs::read(dir.join("results.json")).unwrap(),
        std::fs::read(dir.join("comparison.csv")).unwrap(),
    )
}

#[test]
fn criterion_13_end_to_end_determinism() {
    for model in ["mm", "dm"] {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let (model_a, results_a, cmp_a) = run_pipeline(dir_a.path(), model);
        let (model_b, results_b, cmp_b) = run_pipeline(dir_b.path(), model);
        assert_eq!(model_a, model_b, "{model}: model artifacts differ between runs");
        assert_eq!(results_a, results_b, "{model}: result files differ between runs");
        assert_eq!(cmp_a, cmp_b, "{model}: comparison tables differ between runs");
    }
    println!(
        "[PASS] criterion 13 (end-to-end determinism): \
         simulate -> fit -> predict -> evaluate byte-identical across runs for mm and dm"
    );
}

#[test]
fn chain_ladder_predicts_without_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "cl", "");
    let run = |cmd: &str, extra: &[&str]| {
        Command::new(binary())
            .arg(cmd)
            .arg("--config")
            .arg(&config)
            .args(extra)
            .output()
            .unwrap()
    };
    assert!(run("simulate", &[]).status.success());
    // `fit` for the baseline emits a triangle summary, no parameter artifact.
    let fit = run("fit", &[]);
    assert!(fit.status.success());
    let summary: serde_json::Value =
        serde_json::from_slice(&fit.stdout).expect("triangle summary on stdout");
    assert_eq!(summary["model"], "cl");
    assert!(summary["development_factors"].is_array());
    // Predict via the family override (no model.json needed).
    let predict = run("predict", &["--model", "cl"]);
    assert!(
        predict.status.success(),
        "cl predict failed: {}",
        String::from_utf8_lossy(&predict.stderr)
    );
    let results: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(results["model"], "cl");
    assert_eq!(results["dates"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "dm", "");
    assert!(Command::new(binary())
        .args(["simulate", "--config"])
        .arg(&config)
        .output()
        .unwrap()
        .status
        .success());

    // Non-convergence without --allow-nonconverged: exit 3. Three iterations
    // of MCEM cannot meet a 1e-6 relative-distance threshold.
    let strict = dir.path().join("strict.toml");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("max_iterations = 40", "max_iterations = 3")
        .replace("rel_distance_threshold = 1e-3", "rel_distance_threshold = 1e-6");
    std::fs::write(&strict, text).unwrap();
    let output = Command::new(binary())
        .args(["fit", "--config"])
        .arg(&strict)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "{}", String::from_utf8_lossy(&output.stderr));
    // The artifact is still written for inspection.
    assert!(dir.path().join("model.json").exists());
    // With the flag the same fit exits 0.
    let output = Command::new(binary())
        .args(["fit", "--allow-nonconverged", "--config"])
        .arg(&strict)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));

    // Validation failure: exit 2 (valuation date off the period grid).
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("2015-04-01", "2015-04-15");
    std::fs::write(&bad, text).unwrap();
    assert!(Command::new(binary())
        .args(["fit", "--allow-nonconverged", "--config"])
        .arg(&config)
        .output()
        .unwrap()
        .status
        .success());
    let output = Command::new(binary())
        .args(["predict", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));

    // I/O failure: exit 4 (missing data directory).
    let missing = dir.path().join("missing.toml");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("data\"", "nowhere\"")
        .replace("data/truth.json", "nowhere/truth.json");
    std::fs::write(&missing, text).unwrap();
    let output = Command::new(binary())
        .args(["fit", "--config"])
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn seed_and_model_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "mm", "");
    let out = Command::new(binary())
        .args(["simulate", "--seed", "123", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success());
    let claims_a = std::fs::read(dir.path().join("data/claims.csv")).unwrap();
    // Same override again: identical bytes.
    Command::new(binary())
        .args(["simulate", "--seed", "123", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    let claims_b = std::fs::read(dir.path().join("data/claims.csv")).unwrap();
    assert_eq!(claims_a, claims_b);
    // Different seed: different portfolio.
    Command::new(binary())
        .args(["simulate", "--seed", "124", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    let claims_c = std::fs::read(dir.path().join("data/claims.csv")).unwrap();
    assert_ne!(claims_a, claims_c);
}

#[test]
fn env_overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "mm", "");
    let out = Command::new(binary())
        .args(["simulate", "--config"])
        .arg(&config)
        .env("IBNRCOX_SIMULATE_SEED", "123")
        .output()
        .unwrap();
    assert!(out.status.success());
    let via_env = std::fs::read(dir.path().join("data/claims.csv")).unwrap();
    Command::new(binary())
        .args(["simulate", "--seed", "123", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    let via_flag = std::fs::read(dir.path().join("data/claims.csv")).unwrap();
    assert_eq!(via_env, via_flag);
}
