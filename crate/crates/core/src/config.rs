//! Run configuration: named profiles ("desk" for laptop-scale smoke runs,
//! "full" for the production-scale settings) plus TOML files that select a
//! profile and override any subset of fields.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::error::{Error, Result};
use crate::rollout::RolloutConfig;
use crate::trainer::MetaTrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: String,
    pub trainer: MetaTrainerConfig,
    pub rollout: RolloutConfig,
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn from_profile(name: &str) -> Result<Self> {
        let trainer = match name {
            "desk" => MetaTrainerConfig::desk(),
            "full" => MetaTrainerConfig::full(),
            other => {
                return Err(Error::Config(format!(
                    "unknown profile {:?}; expected \"desk\" or \"full\"",
                    other
                )))
            }
        };
        Ok(RunConfig {
            profile: name.to_string(),
            trainer,
            rollout: RolloutConfig::default(),
            baseline: BaselineConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.rollout.eval_every == 0 {
            return Err(Error::Config("rollout.eval_every must be >= 1".into()));
        }
        if self.rollout.labeled_per_class == 0 {
            return Err(Error::Config("rollout.labeled_per_class must be >= 1".into()));
        }
        if self.baseline.lr <= 0.0 || !self.baseline.lr.is_finite() {
            return Err(Error::Config("baseline.lr must be positive".into()));
        }
        if self.baseline.labeled_per_class == 0 {
            return Err(Error::Config("baseline.labeled_per_class must be >= 1".into()));
        }
        Ok(())
    }

    /// The full effective configuration as TOML (what a file would need to
    /// say to reproduce this run without relying on profile defaults).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("encoding: {}", e)))
    }
}

fn merge_value(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse a TOML string: the optional top-level `profile` key picks the
/// defaults, and any other keys override individual fields.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let over: toml::Value =
        text.parse().map_err(|e| Error::Config(format!("config parse: {}", e)))?;
    let profile = over
        .get("profile")
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Config("profile must be a string".into()))
        })
        .transpose()?
        .unwrap_or_else(|| "desk".to_string());
    let base = RunConfig::from_profile(&profile)?;
    let mut merged =
        toml::Value::try_from(&base).map_err(|e| Error::Config(format!("encoding: {}", e)))?;
    merge_value(&mut merged, over);
    let cfg: RunConfig =
        merged.try_into().map_err(|e| Error::Config(format!("config fields: {}", e)))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
