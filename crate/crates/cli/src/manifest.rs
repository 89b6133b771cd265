use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(subcommand: &str, config: impl Serialize, seed: Option<u64>) -> anyhow::Result<Self> {
        Ok(Self {
            subcommand: subcommand.into(),
            config: serde_json::to_value(config)?,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: now(),
            finished_unix: 0.0,
            outputs: Vec::new(),
        })
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(mut self, dir: &Path) -> anyhow::Result<()> {
        self.finished_unix = now();
        mchmm::io::write_json(&self, dir.join("manifest.json"))?;
        Ok(())
    }
}
