//! Experiment configuration: one TOML document fully determines a run.
//!
//! An empty document resolves to the full method at default settings; the
//! file only spells out deviations. Unknown keys are rejected by name so a
//! misspelled override cannot silently fall back to a default.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use cczsl_core::continual::{ContinualError, TrainConfig};
use cczsl_core::eval::InferenceWeights;
use cczsl_core::world::{
    build_space, parse_split_file, split_constrained, table_shape, CompositionSpace, SessionSpec,
    TableDataset, WorldError,
};

use crate::CliError;

/// Where the session split comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitSource {
    /// A random constrained split of a synthetic attribute-object space.
    Generated { attrs: usize, objs: usize, sessions: usize, seed: u64, seen_fraction: f64 },
    /// A benchmark shape bundled with the crate, by dataset name.
    Table { dataset: String },
    /// A split schema file on disk.
    File { path: PathBuf },
}

impl Default for SplitSource {
    fn default() -> Self {
        SplitSource::Generated { attrs: 12, objs: 8, sessions: 3, seed: 3, seen_fraction: 0.5 }
    }
}

impl SplitSource {
    /// Parses the compact command-line form: `table:NAME` or `file:PATH`.
    pub fn from_flag(flag: &str) -> Result<Self, CliError> {
        match flag.split_once(':') {
            Some(("table", name)) if !name.is_empty() => {
                Ok(SplitSource::Table { dataset: name.to_string() })
            }
            Some(("file", path)) if !path.is_empty() => {
                Ok(SplitSource::File { path: PathBuf::from(path) })
            }
            _ => Err(CliError::Config {
                detail: format!(
                    "split flag must look like table:NAME or file:PATH, got {flag:?}"
                ),
            }),
        }
    }

    /// Resolves the source into a space and validated session specs.
    pub fn resolve(&self) -> Result<(CompositionSpace, Vec<SessionSpec>), CliError> {
        match self {
            SplitSource::Generated { attrs, objs, sessions, seed, seen_fraction } => {
                let attr_names = (0..*attrs).map(|i| format!("attr{i:03}")).collect();
                let obj_names = (0..*objs).map(|i| format!("obj{i:03}")).collect();
                let space = build_space(attr_names, obj_names, None).map_err(world_err)?;
                let splits =
                    split_constrained(&space, *sessions, *seed, *seen_fraction).map_err(world_err)?;
                Ok((space, splits))
            }
            SplitSource::Table { dataset } => {
                let shape = table_shape(TableDataset::from_name(dataset).map_err(world_err)?);
                let text = serde_json::to_string(&shape).map_err(|e| CliError::Config {
                    detail: format!("bundled shape for {dataset:?} did not serialize: {e}"),
                })?;
                parse_split_file(&text).map_err(world_err)
            }
            SplitSource::File { path } => {
                let text = std::fs::read_to_string(path)?;
                parse_split_file(&text).map_err(world_err)
            }
        }
    }

    /// A short label for manifests and reports.
    pub fn label(&self) -> String {
        match self {
            SplitSource::Generated { attrs, objs, sessions, seed, .. } => {
                format!("generated {attrs}x{objs} over {sessions} sessions (seed {seed})")
            }
            SplitSource::Table { dataset } => format!("table:{dataset}"),
            SplitSource::File { path } => format!("file:{}", path.display()),
        }
    }
}

fn world_err(e: WorldError) -> CliError {
    CliError::Config { detail: e.to_string() }
}

/// Which training objectives stay enabled. Defaults reproduce the full
/// method; switching one off zeroes its weight, which is exactly the same
/// computation with that term dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSwitches {
    pub cskd: bool,
    pub cal: bool,
    pub opl: bool,
    pub idl: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches { cskd: true, cal: true, opl: true, idl: true }
    }
}

/// The complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub splits: SplitSource,
    pub train: TrainConfig,
    pub inference: InferenceWeights,
    pub ablation: AblationSwitches,
    /// Write per-session checkpoints alongside the metrics.
    pub checkpoints: bool,
    /// Default output directory; the command line may override it.
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The training configuration with ablation switches folded in.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut train = self.train.clone();
        if !self.ablation.cskd {
            train.loss.lambda_kd = 0.0;
        }
        if !self.ablation.cal {
            train.loss.lambda_cal = 0.0;
        }
        if !self.ablation.opl {
            train.loss.lambda_opl = 0.0;
        }
        if !self.ablation.idl {
            train.loss.lambda_idl = 0.0;
        }
        train
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.resolved_train().validate().map_err(|e: ContinualError| CliError::Config {
            detail: e.to_string(),
        })?;
        self.inference
            .validate()
            .map_err(|e| CliError::Config { detail: e.to_string() })?;
        Ok(())
    }
}

/// Parses a TOML document into a fully-resolved configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Config { detail: e.to_string() })?;
    config.validate()?;
    Ok(config)
}

/// Loads a configuration file, or the defaults when no path is given.
pub fn load_config(path: Option<&std::path::Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Missing {
                what: "config file",
                path: p.to_path_buf(),
                detail: e.to_string(),
            })?;
            parse_config(&text)
        }
        None => Ok(ExperimentConfig::default()),
    }
}
