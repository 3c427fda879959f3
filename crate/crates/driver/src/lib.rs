//! Configuration, scenario orchestration, CSV reporting and the oracle suite
//! of the `kmsuq` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod oracle;
pub mod output;
pub mod scenario;

use std::path::{Path, PathBuf};

use config::{parse_file, ConfigError};
use output::OutputDir;
use scenario::{run_scenario, Check, Scenario, ScenarioError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug)]
pub struct Invocation {
    pub scenario: Scenario,
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub strict: bool,
}

#[derive(Debug)]
pub struct Completed {
    pub checks: Vec<Check>,
    pub out_dir: PathBuf,
    pub exit_code: i32,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Scenario(ScenarioError::Config(_)) => EXIT_CONFIG,
            RunError::Scenario(ScenarioError::Core(kmsuq_core::Error::InvalidParameter { .. })) => EXIT_CONFIG,
            _ => EXIT_ASSERTION,
        }
    }
}

/// Exit status for a finished scenario: failed hard checks always fail the
/// run, the others only in strict mode.
pub fn exit_code(checks: &[Check], strict: bool) -> i32 {
    if checks.iter().any(|c| !c.pass && (c.hard || strict)) {
        EXIT_ASSERTION
    } else {
        EXIT_OK
    }
}

pub fn execute(inv: &Invocation) -> Result<Completed, RunError> {
    let cfg = parse_file(&inv.config)?;
    let dir = inv.out.clone().unwrap_or_else(|| Path::new(&cfg.output.dir).to_path_buf());
    let mut out = OutputDir::create(&dir)?;
    let checks = run_scenario(inv.scenario, &cfg, &mut out)?;
    out.csv(
        "checks.csv",
        &["check", "status", "hard", "detail"],
        checks.iter().map(|c| {
            vec![
                c.name.clone(),
                if c.pass { "pass" } else { "fail" }.to_string(),
                c.hard.to_string(),
                c.detail.clone(),
            ]
        }),
    )?;
    out.finish(inv.scenario.name(), &cfg.hash())?;
    Ok(Completed {
        exit_code: exit_code(&checks, inv.strict),
        checks,
        out_dir: dir,
    })
}
