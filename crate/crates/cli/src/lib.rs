//! Command-line experiment runner for the continual compositional
//! zero-shot learner.
//!
//! The binary front-end parses flags and hands off to this library, so
//! every command is testable in-process. A run consumes one TOML
//! configuration (or pure defaults), executes the session protocol, and
//! leaves a self-describing artifact directory behind: metric reports,
//! prediction dumps, calibration curves, checkpoints, and a manifest that
//! pins everything the numbers depend on. Identical configurations write
//! byte-identical metric summaries.

use std::error::Error;
use std::fmt;
use std::path::PathBuf;

pub mod artifacts;
pub mod config;

pub use artifacts::{
    compare_dirs, eval_dump, execute_run, load_summary, render_report, validate_source,
    CompareReport, RunSummary, SessionSummary,
};
pub use config::{
    load_config, parse_config, AblationSwitches, ExperimentConfig, SplitSource,
};

#[derive(Debug)]
pub enum CliError {
    Config { detail: String },
    Io(std::io::Error),
    Run(cczsl_core::continual::ContinualError),
    Eval(cczsl_core::eval::EvalError),
    /// The output location already holds artifacts and no force flag was given.
    Collision { path: PathBuf },
    /// Two run directories cannot be compared.
    Incomparable { why: String },
    Missing { what: &'static str, path: PathBuf, detail: String },
    Corrupt { what: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { detail } => write!(f, "configuration error: {detail}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::Run(e) => write!(f, "run failed: {e}"),
            CliError::Eval(e) => write!(f, "evaluation failed: {e}"),
            CliError::Collision { path } => write!(
                f,
                "output {} already holds artifacts; pass --force to overwrite",
                path.display()
            ),
            CliError::Incomparable { why } => write!(f, "runs are not comparable: {why}"),
            CliError::Missing { what, path, detail } => {
                write!(f, "missing {what} at {}: {detail}", path.display())
            }
            CliError::Corrupt { what } => write!(f, "artifact is corrupt: {what}"),
        }
    }
}

impl Error for CliError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            CliError::Io(e) => Some(e),
            CliError::Run(e) => Some(e),
            CliError::Eval(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<cczsl_core::continual::ContinualError> for CliError {
    fn from(e: cczsl_core::continual::ContinualError) -> Self {
        CliError::Run(e)
    }
}

impl From<cczsl_core::eval::EvalError> for CliError {
    fn from(e: cczsl_core::eval::EvalError) -> Self {
        CliError::Eval(e)
    }
}
