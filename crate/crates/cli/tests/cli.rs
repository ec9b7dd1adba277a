use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn coherit(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coherit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("COHERIT_LOG")
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn error_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn fit_on_simulated_csv_reports_every_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(
        coherit(&["simulate", "--families", "300", "--reps", "1", "--seed", "3"], &sim)
            .status
            .success()
    );
    let csv = sim.join("cohort_0001.csv");
    let fitted = dir.path().join("fit");
    let out = coherit(&["fit", "--input", csv.to_str().unwrap()], &fitted);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let est = json(&fitted.join("estimate.json"));
    for key in [
        "alpha1",
        "alpha2",
        "beta1_1",
        "beta1_4",
        "beta2_1",
        "beta2_4",
        "gamma2",
        "sigma1",
        "sigma2",
        "sigma_b",
        "sigma_eps1",
        "sigma_eps2",
        "rho12",
        "h2_1",
        "h2_2",
        "h2_12",
    ] {
        assert!(est[key].is_f64(), "missing `{key}` in {est}");
    }
    assert_eq!(est["diagnostics"]["converged"], Value::Bool(true));

    let truth = json(&sim.join("truth.json"));
    assert!(truth["sigma1"].is_f64());
}

#[test]
fn manifest_checksums_match_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(coherit(&["fit", "--families", "200"], dir.path()).status.success());
    let manifest = json(&dir.path().join("run_manifest.json"));
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["seed"], manifest["config"]["simulation"]["seed"]);
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert!(!artifacts.is_empty());
    for a in artifacts {
        let data = std::fs::read(dir.path().join(a["path"].as_str().unwrap())).unwrap();
        assert_eq!(a["bytes"].as_u64().unwrap() as usize, data.len());
        let digest = format!("{:x}", <sha2::Sha256 as sha2::Digest>::digest(&data));
        assert_eq!(a["sha256"].as_str().unwrap(), digest);
    }
}

#[test]
fn manifest_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    assert!(coherit(
        &[
            "bootstrap",
            "--families",
            "150",
            "--boot",
            "4",
            "--seed",
            "8",
            "--rho",
            "0.1"
        ],
        &first
    )
    .status
    .success());
    let manifest = json(&first.join("run_manifest.json"));
    let config = dir.path().join("config.json");
    std::fs::write(&config, serde_json::to_vec(&manifest["config"]).unwrap()).unwrap();
    let second = dir.path().join("second");
    assert!(coherit(&["bootstrap", "--config", config.to_str().unwrap()], &second)
        .status
        .success());
    for name in ["estimate.json", "bootstrap.csv", "bootstrap.json", "run_manifest.json"] {
        assert_eq!(
            std::fs::read(first.join(name)).unwrap(),
            std::fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn bootstrap_csv_has_one_row_per_free_parameter() {
    let dir = tempfile::tempdir().unwrap();
    assert!(coherit(&["bootstrap", "--families", "150", "--boot", "5"], dir.path())
        .status
        .success());
    let text = std::fs::read_to_string(dir.path().join("bootstrap.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "parameter,estimate,ci_lo,ci_hi,boot_sd,n_success"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 21);
    assert!(rows.iter().any(|r| r.starts_with("rho12,")));
}

#[test]
fn weights_command_fits_and_applies_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = coherit(
        &["weights", "--families", "300", "--phenotype-missing", "0.25"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("weights.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "family_id,weight");
    let weights: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(weights.len(), 300);
    assert!(weights.iter().all(|w| (1.0..=50.0).contains(w)));
    assert!(weights.iter().any(|w| *w > 1.0));
    let report = json(&dir.path().join("weights.json"));
    assert_eq!(report["model"]["names"][0], "intercept");

    let fitted = dir.path().join("weighted_fit");
    let weights_path = dir.path().join("weights.csv");
    let input = dir.path().join("weighted_cohort.csv");
    let out = coherit(
        &[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--weights",
            weights_path.to_str().unwrap(),
        ],
        &fitted,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        json(&fitted.join("run_manifest.json"))["inputs"]
            .as_array()
            .unwrap()
            .len(),
        2
    );
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = coherit(&["fit", "--input", "/nonexistent/cohort.csv"], dir.path());
    assert_eq!(out.status.code(), Some(5));
    let err = error_of(&out);
    assert_eq!(err["error"], "io");
    assert_eq!(err["exit_code"], 5);
}

#[test]
fn invalid_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"bootstrapp": 3}"#).unwrap();
    let out = coherit(&["fit", "--config", config.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_of(&out)["error"], "config");

    let out = coherit(&["simulate", "--rate", "1.5"], &dir.path().join("b"));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn malformed_cohort_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cohort.csv");
    std::fs::write(&csv, "family_id,role,weight\nF1,Parent1,1\n").unwrap();
    let out = coherit(&["fit", "--input", csv.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_of(&out)["error"], "schema");
}

#[test]
fn unknown_roles_are_pedigree_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cohort.csv");
    std::fs::write(
        &csv,
        "family_id,role,weight,present,x1,x2,y1,y2\nF1,Parent1,1,1,0.1,0.2,1.0,2.0\nF1,Child3,1,1,0.1,0.2,1.0,2.0\n",
    )
    .unwrap();
    let out = coherit(&["fit", "--input", csv.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(6));
    let err = error_of(&out);
    assert_eq!(err["error"], "invalid_pedigree");
    assert_eq!(err["exit_code"], 6);
}
