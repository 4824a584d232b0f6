//! Writes an experiment's tables, resolved config and summary record.
//!
//! Layout of the output directory:
//!
//! * `<table>.csv` for every table, comma-separated with a header row;
//! * `config.toml`, the config with every default made explicit;
//! * `summary.json`, a [`Summary`] record.
//!
//! Tables and `config.toml` depend only on the config; `summary.json` also
//! records wall time and thread count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{Check, ExperimentConfig, ExperimentOutput};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    /// `<kind>-<benchmark>-<first 12 hex digits of the config hash>`.
    pub experiment_id: String,
    pub kind: String,
    pub benchmark: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub paths: usize,
    pub base_steps: usize,
    pub threads: usize,
    pub wall_time_seconds: f64,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub tables: Vec<String>,
    /// Set when the experiment aborted (for example on divergence).
    pub error: Option<String>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes all files into `dir` (created if missing) and returns the summary.
pub fn write_report(
    dir: &Path,
    config: &ExperimentConfig,
    outcome: &Result<ExperimentOutput>,
    wall_time_seconds: f64,
    threads: usize,
) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let resolved = config.resolved()?;
    let hash = config.hash()?;
    let mut explicit = resolved.clone();
    explicit.out = None;
    write(&dir.join("config.toml"), &explicit.to_toml()?)?;

    let (checks, tables, error) = match outcome {
        Ok(out) => {
            for t in &out.tables {
                write(&dir.join(format!("{}.csv", t.name)), &t.to_csv())?;
            }
            (out.checks.clone(), out.tables.iter().map(|t| format!("{}.csv", t.name)).collect(), None)
        }
        Err(e) => (Vec::new(), Vec::new(), Some(e.to_string())),
    };
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        experiment_id: format!("{}-{}-{}", resolved.kind.name(), resolved.benchmark_name(), &hash[..12]),
        kind: resolved.kind.name().to_string(),
        benchmark: resolved.benchmark_name().to_string(),
        config_hash: hash,
        master_seed: resolved.seed,
        paths: resolved.paths,
        base_steps: resolved.steps(),
        threads,
        wall_time_seconds,
        pass: error.is_none() && checks.iter().all(|c| c.pass),
        checks,
        tables,
        error,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
    write(&dir.join("summary.json"), &(json + "\n"))?;
    Ok(summary)
}
