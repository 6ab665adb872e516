use std::path::Path;

use lipsync::evaluation::EvaluationConfig;
use lipsync::synthetic::SyntheticConfig;
use lipsync::training::RunConfig;
use lipsync::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a subcommand may read, one TOML table per section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub model: lipsync::sync_model::ModelConfig,
    pub sampler: lipsync::training::SamplerConfig,
    pub train: lipsync::training::TrainConfig,
    pub eval: EvaluationConfig,
    pub synthetic: SyntheticConfig,
}

impl CliConfig {
    /// Reads `path` (or starts from defaults), applies `key.path=value`
    /// overrides, then deserializes, rejecting unknown keys.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                if !p.is_file() {
                    return Err(Error::Config(format!("config file not found: {}", p.display())));
                }
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: CliConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.model.validate()?;
        cfg.sampler.validate()?;
        cfg.train.validate()?;
        cfg.eval.validate()?;
        cfg.synthetic.validate()?;
        Ok(cfg)
    }

    pub fn run(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            sampler: self.sampler.clone(),
            train: self.train.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("<unprintable config: {e}>"))
    }
}

/// Sets `a.b.c = value`, creating intermediate tables. The value is read as
/// a TOML literal when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form section.key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} must name section.key")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut cursor = table;
    for p in parents {
        let next = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
