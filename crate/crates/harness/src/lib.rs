//! Reproducible Monte Carlo experiments around `shevar-core`: LLN and CLT
//! checks, estimator coverage studies, exact-identity sweeps and Hölder
//! scaling, with JSON/CSV reports.

pub mod config;
pub mod experiments;
pub mod report;

use std::fs;
use std::path::Path;

pub use config::{ExperimentConfig, ExperimentKind, Sampler};
pub use experiments::run;
pub use report::{ExperimentReport, ReplicateRecord, Summary};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("out of scope: {0}")]
    OutOfScope(String),
    #[error(transparent)]
    Core(#[from] shevar_core::Error),
    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        source: shevar_core::Error,
    },
    #[error("output: {0}")]
    Output(String),
}

/// Runs `job` on a dedicated pool of `threads` workers (all cores if `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(pool.install(job))
}

/// Writes `report.json` and `replicates.csv` into `dir`.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<(), HarnessError> {
    let out = |e: std::io::Error| HarnessError::Output(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(out)?;
    fs::write(dir.join("report.json"), report.to_json()?).map_err(out)?;
    let mut csv = Vec::new();
    report::write_records_csv(&mut csv, &report.records)?;
    fs::write(dir.join("replicates.csv"), csv).map_err(out)?;
    Ok(())
}
