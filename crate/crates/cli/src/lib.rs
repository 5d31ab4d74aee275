//! Staged experiment driver: CT pre-training, multi-modal adaptation,
//! continual fine-tuning, evaluation, prognosis and reporting.
//!
//! Each invocation reads one TOML run configuration and writes a
//! self-describing run directory (config snapshot, manifest copy,
//! checkpoints, metrics and a `run_record.json`).

pub mod bundle;
pub mod config;
pub mod error;
pub mod outputs;
pub mod prognosis;
pub mod report;
pub mod stages;
pub mod train;

use std::path::Path;

pub use config::{Method, Overrides, RunConfig, Scope, Stage};
pub use error::{CliError, CliResult};
pub use outputs::RunRecord;

/// Loads `config`, applies the overrides and runs `stage`.
pub fn execute(stage: Stage, config: &Path, overrides: &Overrides) -> CliResult<RunRecord> {
    let cfg = RunConfig::load(config)?.resolve(stage, overrides)?;
    stages::run(cfg)
}

/// Runs an in-memory configuration (used by tests and scripts).
pub fn execute_config(stage: Stage, cfg: RunConfig, overrides: &Overrides) -> CliResult<RunRecord> {
    stages::run(cfg.resolve(stage, overrides)?)
}
