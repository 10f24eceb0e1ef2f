//! Command-line orchestration of the forge pipeline: configuration,
//! workspace layout, stage execution and reporting.

pub mod config;
pub mod report;
pub mod stages;
pub mod workspace;

use std::path::Path;

use thiserror::Error;

use crate::config::ConfigError;
use crate::stages::{Ctx, RunOptions};
use crate::workspace::STAGES;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed: {source:#}")]
    Stage {
        stage: String,
        source: anyhow::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }
}

/// Runs one stage, or every stage in order for `pipeline`. Returns a
/// `(stage, summary)` line per stage executed.
pub fn execute(
    command: &str,
    config: &Path,
    overrides: &[String],
    opts: RunOptions,
) -> Result<Vec<(String, String)>, CliError> {
    let resolved = config::load(config, overrides)?;
    let ctx = Ctx { r: &resolved, opts };
    let names: Vec<&str> = if command == "pipeline" {
        STAGES.to_vec()
    } else {
        vec![command]
    };
    let mut log = Vec::new();
    for name in names {
        let f = stages::lookup(name).ok_or_else(|| CliError::Stage {
            stage: name.into(),
            source: anyhow::anyhow!("unknown stage"),
        })?;
        let line = f(&ctx).map_err(|source| CliError::Stage {
            stage: name.into(),
            source,
        })?;
        log.push((name.to_string(), line));
    }
    Ok(log)
}
