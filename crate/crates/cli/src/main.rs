//! `mchmm`: simulate exposed-infected epidemics, fit the triple HMM to
//! isolation counts, recover rates, and compare against the
//! one-compartment model.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mchmm::Error>() {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MCHMM_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("MCHMM_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("MCHMM_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| commands::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
