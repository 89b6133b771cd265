use std::path::Path;
use std::process::{Command, Output};

fn mchmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mchmm"))
        .args(args)
        .env("MCHMM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mchmm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_then_observe_reproduces_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&["simulate", "--horizon", "500", "--seed", "3", "--out", d]);
    let first = std::fs::read_to_string(dir.path().join("observations.csv")).unwrap();
    assert_eq!(first.lines().count(), 501);
    let again = dir.path().join("again");
    let traj = dir.path().join("trajectory.csv");
    ok(&["observe", "--trajectory", traj.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(again.join("observations.csv")).unwrap(), first);

    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["subcommand"], "simulate");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config"]["truth"]["lambda"], 0.05);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn same_seed_same_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["simulate", "--horizon", "300", "--seed", "9", "--replications", "2", "--out", d.path().to_str().unwrap()]);
    }
    for name in ["trajectory_0000.csv", "observations_0001.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn flags_override_params_file() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    std::fs::write(&params, r#"{"lambda": 0.04, "mu": 0.3, "alpha": 0.2, "nu": 0.01}"#).unwrap();
    ok(&["moments", "--params", params.to_str().unwrap(), "--mu", "0.25", "--out", dir.path().to_str().unwrap()]);
    let m = json(&dir.path().join("moments.json"));
    // I* = nu / (mu - lambda) with mu from the flag and the rest from the file.
    let i_star = m["closed_form"]["i_star"].as_f64().unwrap();
    assert!((i_star - 0.01 / (0.25 - 0.04)).abs() < 1e-15);
}

#[test]
fn unstable_rates_exit_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let out = mchmm(&["moments", "--lambda", "0.3", "--mu", "0.2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(mchmm(&["simulate", "--horizon", "-1", "--out", d]).status.code(), Some(2));
    assert_eq!(mchmm(&["moments", "--nu", "-0.1", "--out", d]).status.code(), Some(2));
    assert_eq!(mchmm(&["moments", "--model", "1", "--alpha", "0.1", "--out", d]).status.code(), Some(2));
    let missing = dir.path().join("nope.csv");
    assert_eq!(mchmm(&["fit", "--obs", missing.to_str().unwrap(), "--out", d]).status.code(), Some(2));
}

#[test]
fn skeleton_oracle_writes_matrix() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["skeleton", "--method", "oracle", "--trunc-n", "2", "--out", dir.path().to_str().unwrap()]);
    let c = json(&dir.path().join("skeleton.json"));
    assert_eq!(c["n_state"], 2);
    let t: Vec<f64> = serde_json::from_value(c["transition"].clone()).unwrap();
    assert_eq!(t.len(), 81);
    for row in t.chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(dir.path().join("transition.csv").exists());
}

#[test]
fn fit_and_select_small() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&["simulate", "--horizon", "400", "--seed", "1", "--out", d]);
    let obs = dir.path().join("observations.csv");
    let obs = obs.to_str().unwrap();
    let small = ["--trunc-n", "1", "--starts", "2", "--max-iter", "3", "--transitions", "300", "--chain-steps", "20000"];

    let fit_dir = dir.path().join("fit");
    let mut args = vec!["fit", "--obs", obs, "--out", fit_dir.to_str().unwrap()];
    args.extend(small);
    ok(&args);
    let f = json(&fit_dir.join("fit.json"));
    assert!(f["log_likelihood"].as_f64().unwrap() < 0.0);
    assert_eq!(f["starts"].as_array().unwrap().len(), 2);
    assert!(fit_dir.join("model.json").exists());

    let sel_dir = dir.path().join("select");
    let mut args = vec!["select", "--obs", obs, "--out", sel_dir.to_str().unwrap()];
    args.extend(small);
    ok(&args);
    let s = json(&sel_dir.join("selection.json"));
    let models = s[0]["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    assert_eq!(models[0]["k"], 3);
    assert_eq!(models[1]["k"], 4);
    let csv = std::fs::read_to_string(sel_dir.join("selection.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn pooled_skeleton_with_chain_moments() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "skeleton", "--trunc-n", "2", "--replicas", "20", "--windows", "500", "--chain-steps", "5000",
        "--out", dir.path().to_str().unwrap(),
    ]);
    let c = json(&dir.path().join("skeleton.json"));
    let psi: Vec<f64> = serde_json::from_value(c["emission"].clone()).unwrap();
    assert_eq!(psi.len(), 27 * 3);
    for row in psi.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
    let s = json(&dir.path().join("skeleton_summary.json"));
    assert!(s["chain"]["e"]["mean"].as_f64().unwrap() >= 0.0);
    assert!(s["stationary"]["n_rate"].as_f64().is_some());
}
