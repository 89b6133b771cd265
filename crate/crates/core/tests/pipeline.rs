use mchmm::baum_welch::{run_em, FitConfig};
use mchmm::hmm::{build_hmm, log_likelihood};
use mchmm::io::{read_json, read_observations, read_trajectory, write_json, write_observations, write_trajectory, ModelContainer};
use mchmm::sim::{simulate, skeleton_sample};
use mchmm::skeleton::{estimate_skeleton, SkeletonSampling};
use mchmm::{EiState, ModelParams};

fn baseline() -> ModelParams {
    ModelParams { lambda: 0.05, mu: 0.2, alpha: 0.1, nu: 0.015 }
}

#[test]
fn simulate_store_and_score() {
    let traj = simulate(&baseline(), EiState::ORIGIN, 2000.0, 21).unwrap();
    let mut buf = Vec::new();
    write_trajectory(&traj, &mut buf).unwrap();
    let back = read_trajectory(buf.as_slice()).unwrap();
    assert_eq!(back, traj);

    let obs = skeleton_sample(&back, 1.0).unwrap().observations;
    assert_eq!(obs.len(), 2000);
    assert_eq!(obs.total(), traj.cumulative_isolations);
    let mut buf = Vec::new();
    write_observations(&obs, &mut buf).unwrap();
    let obs = read_observations(buf.as_slice(), 1.0).unwrap();

    let cfg = FitConfig { n_state: 2, ..FitConfig::default() };
    let trunc = cfg.truncation(&obs).unwrap();
    let est = estimate_skeleton(&baseline(), trunc, 1.0, SkeletonSampling::PerState { transitions_per_row: 2000 }, 3).unwrap();
    let h = build_hmm(&est.matrix, &est.emissions, &est.matrix.stationary()).unwrap();
    let ll0 = log_likelihood(&h, &obs).unwrap();
    let (fitted, trace, _, _) = run_em(h, &obs, 5, 1e-9).unwrap();
    assert_eq!(trace[0], ll0);
    assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    write_json(&ModelContainer::from_hmm(&fitted), &path).unwrap();
    let loaded = read_json::<ModelContainer>(&path).unwrap().hmm().unwrap();
    assert_eq!(loaded.q, fitted.q);
    assert_eq!(log_likelihood(&loaded, &obs).unwrap(), log_likelihood(&fitted, &obs).unwrap());
}
