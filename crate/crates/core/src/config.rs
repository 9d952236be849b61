//! Run configuration: one TOML file with a section per module. Missing keys
//! take their defaults; unknown keys are rejected with a suggestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evaluation::EvalConfig;
use crate::exploration::ExplorationConfig;
use crate::model::ModelConfig;
use crate::optimization::TrainConfig;
use crate::pipeline::PipelineConfig;
use crate::world::WorldConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; 0 uses every core, 1 is the single-worker reference mode.
    /// Outputs do not depend on this value.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub world: WorldConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub exploration: ExplorationConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.world.validate().map_err(|e| invalid(&e))?;
        self.pipeline.validate().map_err(|e| invalid(&e))?;
        if self.model.hidden_dim == 0 {
            return Err(ConfigError::Invalid("model.hidden_dim must be positive".into()));
        }
        self.exploration.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.eval.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses, fills defaults, rejects unknown keys and validates.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let defaults = toml::Table::try_from(Config::default()).expect("defaults serialize");
    check_keys(&value, &defaults, "")?;
    let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

fn check_keys(given: &toml::Table, known: &toml::Table, at: &str) -> Result<(), ConfigError> {
    for (key, v) in given {
        let path = if at.is_empty() { key.clone() } else { format!("{at}.{key}") };
        match known.get(key) {
            Some(toml::Value::Table(k)) => {
                if let toml::Value::Table(g) = v {
                    check_keys(g, k, &path)?;
                }
            }
            Some(_) => {}
            None => {
                let suggestion = known
                    .keys()
                    .map(|c| (strsim::damerau_levenshtein(key, c), c))
                    .filter(|(d, c)| *d <= 2.max(c.len() / 3))
                    .min()
                    .map(|(_, c)| if at.is_empty() { c.clone() } else { format!("{at}.{c}") });
                return Err(ConfigError::UnknownKey { key: path, suggestion });
            }
        }
    }
    Ok(())
}
