//! Scenario files, the simulation runner, trace records and the trace
//! checker.

pub mod check;
pub mod scenario;
pub mod trace;

use std::path::Path;

use thiserror::Error;

use crate::cluster::{simulate, ClusterError, RunOutput};
use crate::consistency::BUILTIN_FILES;

pub use check::{check, CheckReport, InvariantResult, Violation};
pub use scenario::{Scenario, ScenarioError};
pub use trace::{parse_trace, render_trace, MalformedTrace, TraceRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Trace(#[from] MalformedTrace),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Loads the scenario at `path`, verifies its appcode and runs it.
pub fn run(path: &Path, seed: Option<u64>) -> Result<(Scenario, RunOutput), HarnessError> {
    let mut sc = Scenario::load(path)?;
    if let Some(s) = seed {
        sc.sim.seed = s;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let out = run_scenario(&sc, base)?;
    Ok((sc, out))
}

/// Runs an already parsed scenario; appcode files resolve against `base_dir`.
pub fn run_scenario(sc: &Scenario, base_dir: &Path) -> Result<RunOutput, HarnessError> {
    let programs = sc.load_programs(base_dir)?;
    Ok(simulate(sc, &programs)?)
}

/// Writes the built-in consistency programs into `dir`.
pub fn export_builtins(dir: &Path) -> Result<(), HarnessError> {
    for (name, src) in BUILTIN_FILES {
        let path = dir.join(name);
        std::fs::write(&path, src).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    }
    Ok(())
}
