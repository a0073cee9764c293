//! Run configuration: defaults, then a TOML file, then command-line overrides.

use std::path::Path;

use cascade_mvs::fusion::FusionParams;
use cascade_mvs::pipeline::StageConfig;
use cascade_mvs::synth::RigConfig;
use cascade_mvs::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub rig: RigConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 32,
            rig: RigConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Interval length of stages 2 and 3 relative to the previous stage.
    pub shrink: [f64; 2],
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { shrink: [0.5, 0.5] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Point-cloud distance cap; derived from the stage-3 ranges when unset.
    pub dist_cap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub stage: StageConfig,
    pub train: TrainConfig,
    pub fusion: FusionParams,
    pub synth: SynthConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key:?}: {p:?} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Builds a configuration from defaults, an optional file and `key=value`
    /// overrides (dotted keys, values in TOML syntax). Unknown keys are errors.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table =
            Table::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| cascade_mvs::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let file: Table = text.parse().map_err(|e: toml::de::Error| {
                CliError::Config(format!("{}: {}", p.display(), e.message()))
            })?;
            merge(&mut table, file);
        }
        for (k, v) in overrides {
            set_path(&mut table, k, parse_value(v))?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: cascade_mvs::Result<()>| {
            r.map_err(|e| CliError::Config(format!("[{name}] {e}")))
        };
        section("stage", self.stage.validate())?;
        section("train", self.train.validate())?;
        section("fusion", self.fusion.validate())?;
        if self.synth.count == 0 {
            return Err(CliError::Config("synth.count must be at least 1".into()));
        }
        if self.baseline.shrink.iter().any(|s| !(*s > 0.0)) {
            return Err(CliError::Config(
                "baseline.shrink factors must be positive".into(),
            ));
        }
        if let Some(c) = self.eval.dist_cap {
            if !(c > 0.0) {
                return Err(CliError::Config("eval.dist_cap must be positive".into()));
            }
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
