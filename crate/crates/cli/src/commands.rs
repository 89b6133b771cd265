use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mchmm::baum_welch::{estimate_parameters, fit, FitConfig, InitRanges, ParamRange, DEFAULT_BURN_IN};
use mchmm::io::{read_observations, read_trajectory, write_json, write_observations, write_trajectory, ModelContainer};
use mchmm::lbdi::{lbdi_estimate, lbdi_fit, lbdi_limit_moments, lbdi_simulate, LbdiParams};
use mchmm::master_eq::transition_tensor;
use mchmm::moments::{limit_moments, plugin_estimate, EmpiricalMoments};
use mchmm::rng::derive_seed;
use mchmm::select::{compare, replicate_selection, write_selection_csv, Truth};
use mchmm::sim::{mc_moments, simulate, skeleton_sample, Dynamics, ObservationSeries, Trajectory};
use mchmm::skeleton::{
    apply_truncation_correction, estimate_skeleton_dynamics, simulate_skeleton, stationary_moments, EmissionTable,
    SkeletonMatrix, SkeletonSampling,
};
use mchmm::{EiState, Lattice, ModelParams};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::manifest::RunManifest;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Observe(a) => observe_cmd(a),
        Command::Moments(a) => moments_cmd(a),
        Command::Skeleton(a) => skeleton_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Select(a) => select_cmd(a),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    lambda: Option<f64>,
    mu: Option<f64>,
    alpha: Option<f64>,
    nu: Option<f64>,
}

/// Flags override the file, which overrides the defaults.
fn resolve_truth(p: &ParamArgs) -> Result<Truth> {
    let file = match &p.params {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ParamFile>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ParamFile::default(),
    };
    let pick = |flag: Option<f64>, file: Option<f64>, default: f64| flag.or(file).unwrap_or(default);
    match p.model {
        ModelArg::Exposed => {
            let m = ModelParams {
                lambda: pick(p.lambda, file.lambda, 0.05),
                mu: pick(p.mu, file.mu, 0.2),
                alpha: pick(p.alpha, file.alpha, 0.1),
                nu: pick(p.nu, file.nu, 0.015),
            };
            m.validate()?;
            Ok(Truth::ExposedInfected(m))
        }
        ModelArg::Lbdi => {
            if p.alpha.is_some() {
                bail!("--alpha does not apply to model 1");
            }
            let m = LbdiParams {
                lambda: pick(p.lambda, file.lambda, 0.05),
                mu: pick(p.mu, file.mu, 0.5),
                nu: pick(p.nu, file.nu, 0.01),
            };
            m.validate()?;
            Ok(Truth::Lbdi(m))
        }
    }
}

fn parse_range(s: &str) -> Result<ParamRange> {
    let (lo, hi) = s.split_once(':').with_context(|| format!("range {s:?} is not LO:HI"))?;
    Ok(ParamRange::new(lo.trim().parse()?, hi.trim().parse()?))
}

fn fit_config(a: &FitArgs) -> Result<FitConfig> {
    let mut ranges = InitRanges::default();
    for (flag, slot) in [
        (&a.init_lambda, &mut ranges.lambda),
        (&a.init_mu, &mut ranges.mu),
        (&a.init_alpha, &mut ranges.alpha),
        (&a.init_nu, &mut ranges.nu),
    ] {
        if let Some(s) = flag {
            *slot = parse_range(s)?;
        }
    }
    let cfg = FitConfig {
        max_iter: a.max_iter,
        tol: a.tol,
        starts: a.starts,
        init_ranges: ranges,
        dt: a.dt,
        n_state: a.trunc_n,
        m_obs: a.trunc_m,
        sampling: SkeletonSampling::PerState { transitions_per_row: a.transitions },
        seed: a.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(o: &OutArgs) -> Result<&Path> {
    fs::create_dir_all(&o.out).with_context(|| format!("creating {}", o.out.display()))?;
    Ok(&o.out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_observations(path: &Path, dt: f64) -> Result<ObservationSeries> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_observations(BufReader::new(f), dt)?)
}

fn save_json<T: Serialize>(m: &mut RunManifest, dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    write_json(value, &path)?;
    m.output(&path);
    Ok(path)
}

fn simulate_one(truth: &Truth, initial: EiState, horizon: f64, seed: u64) -> Result<Trajectory> {
    Ok(match truth {
        Truth::ExposedInfected(p) => simulate(p, initial, horizon, seed)?,
        Truth::Lbdi(p) => {
            if initial.e != 0 {
                bail!("model 1 has no exposed compartment; --e0 must be 0");
            }
            lbdi_simulate(p, initial.i, horizon, seed)?
        }
    })
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let truth = resolve_truth(&a.params)?;
    if a.replications == 0 {
        bail!("--replications must be at least 1");
    }
    let mut m = RunManifest::start("simulate", serde_json::json!({ "args": &a, "truth": truth }), Some(a.seed))?;
    let dir = out_dir(&a.out)?;
    let initial = EiState::new(a.e0, a.i0);
    for r in 0..a.replications {
        let (seed, suffix) = if a.replications == 1 { (a.seed, String::new()) } else { (derive_seed(a.seed, r as u64), format!("_{r:04}")) };
        let traj = simulate_one(&truth, initial, a.horizon, seed)?;
        let obs = skeleton_sample(&traj, a.dt)?.observations;
        let tp = dir.join(format!("trajectory{suffix}.csv"));
        write_trajectory(&traj, create(&tp)?)?;
        let op = dir.join(format!("observations{suffix}.csv"));
        write_observations(&obs, create(&op)?)?;
        m.output(&tp);
        m.output(&op);
        println!("replica {r}: {} events, {} isolations, final state ({}, {})", traj.events.len(), traj.cumulative_isolations, traj.final_state().e, traj.final_state().i);
    }
    m.finish(dir)
}

fn observe_cmd(a: ObserveArgs) -> Result<()> {
    let mut m = RunManifest::start("observe", &a, None)?;
    let f = File::open(&a.trajectory).with_context(|| format!("opening {}", a.trajectory.display()))?;
    let traj = read_trajectory(BufReader::new(f))?;
    let obs = skeleton_sample(&traj, a.dt)?.observations;
    let dir = out_dir(&a.out)?;
    let op = dir.join("observations.csv");
    write_observations(&obs, create(&op)?)?;
    m.output(&op);
    println!("{} windows, {} isolations", obs.len(), obs.total());
    m.finish(dir)
}

fn moments_cmd(a: MomentsArgs) -> Result<()> {
    let truth = resolve_truth(&a.params)?;
    let mut m = RunManifest::start("moments", serde_json::json!({ "args": &a, "truth": truth }), a.mc.then_some(a.seed))?;
    let dir = out_dir(&a.out)?;
    let report = match truth {
        Truth::ExposedInfected(p) => {
            let closed = limit_moments(&p)?;
            let mut report = serde_json::json!({ "closed_form": closed });
            if a.mc {
                let mc = mc_moments(&p, EiState::new(a.e0, a.i0), a.horizon, a.n_mc, a.seed)?;
                let emp = EmpiricalMoments::from(&mc);
                report["monte_carlo"] = serde_json::json!({
                    "e": mc.e, "i": mc.i, "ei": mc.ei, "n_rate": mc.n_rate,
                    "n_mc": mc.n_mc, "horizon": mc.horizon, "point": emp.point,
                });
                report["estimates"] = match plugin_estimate(&emp) {
                    Ok(est) => serde_json::to_value(est)?,
                    Err(e) => serde_json::json!({ "error": e.to_string() }),
                };
            }
            report
        }
        Truth::Lbdi(p) => {
            if a.mc {
                bail!("Monte Carlo moments are only available for model 2");
            }
            serde_json::json!({ "closed_form": lbdi_limit_moments(&p)? })
        }
    };
    let path = save_json(&mut m, dir, "moments.json", &report)?;
    println!("wrote {}", path.display());
    m.finish(dir)
}

fn skeleton_for<D: Dynamics>(
    d: &D,
    lattice: Lattice,
    a: &SkeletonArgs,
) -> Result<(SkeletonMatrix, Option<EmissionTable>, serde_json::Value)> {
    Ok(match a.method {
        SkeletonMethod::Mc => {
            let sampling = match a.replicas {
                Some(replicas) => SkeletonSampling::Pooled { replicas, windows_per_replica: a.windows, burn_in: 0 },
                None => SkeletonSampling::PerState { transitions_per_row: a.transitions },
            };
            let est = estimate_skeleton_dynamics(d, lattice, a.trunc_m, a.dt, sampling, a.seed)?;
            let info = serde_json::json!({ "fallback_rows": est.fallback_rows, "row_totals": est.counts.row_totals });
            (est.matrix, Some(est.emissions), info)
        }
        SkeletonMethod::Oracle => {
            let t = transition_tensor(d, lattice, a.dt)?;
            let raw = SkeletonMatrix::new(lattice, t.probs().to_vec())?;
            let info = serde_json::json!({ "integration_leak": t.integration_leak });
            (apply_truncation_correction(&raw)?, None, info)
        }
    })
}

fn skeleton_cmd(a: SkeletonArgs) -> Result<()> {
    let truth = resolve_truth(&a.params)?;
    let mut m = RunManifest::start("skeleton", serde_json::json!({ "args": &a, "truth": truth }), Some(a.seed))?;
    let dir = out_dir(&a.out)?;
    let (matrix, psi, info) = match truth {
        Truth::ExposedInfected(p) => skeleton_for(&p, Lattice::square(a.trunc_n), &a)?,
        Truth::Lbdi(p) => skeleton_for(&p, Lattice::new(0, a.trunc_n), &a)?,
    };
    save_json(&mut m, dir, "skeleton.json", &ModelContainer::from_skeleton(&matrix, psi.as_ref()))?;
    let tp = dir.join("transition.csv");
    matrix.write_csv(create(&tp)?)?;
    m.output(&tp);
    if let Some(psi) = &psi {
        let ep = dir.join("emission.csv");
        psi.write_csv(create(&ep)?)?;
        m.output(&ep);
    }
    let mut summary = serde_json::json!({
        "info": info,
        "stationary": stationary_moments(&matrix, psi.as_ref(), a.dt),
    });
    if let Some(steps) = a.chain_steps {
        let chain = simulate_skeleton(&matrix, psi.as_ref(), EiState::ORIGIN, a.dt, steps, DEFAULT_BURN_IN, derive_seed(a.seed, 1))?;
        summary["chain"] = serde_json::to_value(chain.moments())?;
    }
    save_json(&mut m, dir, "skeleton_summary.json", &summary)?;
    println!("{} states, max row error {:.3e}", matrix.lattice.pairs(), matrix.max_row_error());
    m.finish(dir)
}

fn fit_cmd(a: FitCmdArgs) -> Result<()> {
    let cfg = fit_config(&a.fit)?;
    let obs = load_observations(&a.obs, cfg.dt)?;
    let mut m = RunManifest::start("fit", serde_json::json!({ "args": &a, "fit_config": &cfg }), Some(cfg.seed))?;
    let dir = out_dir(&a.out)?;
    let (ll, model) = match a.model {
        ModelArg::Exposed => {
            let res = fit(&obs, &cfg)?;
            save_json(&mut m, dir, "fit.json", &res)?;
            (res.log_likelihood, ModelContainer::from_hmm(&res.model))
        }
        ModelArg::Lbdi => {
            let res = lbdi_fit(&obs, &cfg)?;
            save_json(&mut m, dir, "fit.json", &res)?;
            (res.log_likelihood, ModelContainer::from_hmm(&res.model))
        }
    };
    save_json(&mut m, dir, "model.json", &model)?;
    println!("log-likelihood {ll:.6}");
    m.finish(dir)
}

fn estimate_cmd(a: FitCmdArgs) -> Result<()> {
    let cfg = fit_config(&a.fit)?;
    let obs = load_observations(&a.obs, cfg.dt)?;
    let mut m = RunManifest::start("estimate", serde_json::json!({ "args": &a, "fit_config": &cfg }), Some(cfg.seed))?;
    let dir = out_dir(&a.out)?;
    let seed = derive_seed(cfg.seed, 0xe57);
    match a.model {
        ModelArg::Exposed => {
            let rep = estimate_parameters(&obs, &cfg, a.fit.chain_steps, seed)?;
            save_json(&mut m, dir, "model.json", &ModelContainer::from_hmm(&rep.fit.model))?;
            save_json(&mut m, dir, "estimate.json", &rep)?;
            let p = rep.params;
            println!("lambda {:.6} mu {:.6} alpha {:.6} nu {:.6}", p.lambda, p.mu, p.alpha, p.nu);
        }
        ModelArg::Lbdi => {
            let rep = lbdi_estimate(&obs, &cfg, a.fit.chain_steps, seed)?;
            save_json(&mut m, dir, "model.json", &ModelContainer::from_hmm(&rep.fit.model))?;
            save_json(&mut m, dir, "estimate.json", &rep)?;
            let p = rep.params;
            println!("lambda {:.6} mu {:.6} nu {:.6}", p.lambda, p.mu, p.nu);
        }
    }
    m.finish(dir)
}

fn select_cmd(a: SelectArgs) -> Result<()> {
    let cfg = fit_config(&a.fit)?;
    let mut m = RunManifest::start("select", serde_json::json!({ "args": &a, "fit_config": &cfg }), Some(cfg.seed))?;
    let dir = out_dir(&a.out)?.to_path_buf();
    let seed = derive_seed(cfg.seed, 0x5e1);
    let reports = match &a.obs {
        Some(path) => {
            let obs = load_observations(path, cfg.dt)?;
            vec![compare(&obs, &cfg, a.fit.chain_steps, seed)]
        }
        None => {
            let truth = resolve_truth(&a.truth)?;
            replicate_selection(&truth, a.horizon, &cfg, a.replications, a.fit.chain_steps, seed)?
        }
    };
    save_json(&mut m, &dir, "selection.json", &reports)?;
    let cp = dir.join("selection.csv");
    write_selection_csv(&reports, create(&cp)?)?;
    m.output(&cp);
    let wins = |n: u8| reports.iter().filter(|r| r.winner.map(|w| w.number()) == Some(n)).count();
    println!("model 1 preferred {} times, model 2 preferred {} times, {} ties", wins(1), wins(2), reports.iter().filter(|r| r.tie).count());
    m.finish(&dir)
}
