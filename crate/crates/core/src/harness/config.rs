//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corral::CorralConfig;
use crate::efbo::EfboSpec;
use crate::envs::GeneratorSpec;
use crate::error::{CbusError, Result};
use crate::protocol::{validate_instance, Instance};

/// Either an inline generator description or a path to an instance JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstanceSource {
    Generated(GeneratorSpec),
    File(PathBuf),
}

impl InstanceSource {
    /// Relative paths resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Instance> {
        match self {
            InstanceSource::Generated(spec) => spec.generate(),
            InstanceSource::File(path) => {
                let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CbusError::config(format!("cannot read instance {}: {e}", path.display())))?;
                load_checked(&text)
            }
        }
    }
}

/// Parses an instance and rejects it if any invariant is broken.
pub fn load_checked(text: &str) -> Result<Instance> {
    let instance = Instance::from_json(text)?;
    let violations = validate_instance(&instance);
    if let Some(v) = violations.first() {
        return Err(CbusError::config(format!("instance breaks {} invariant(s), first: {v}", violations.len())));
    }
    Ok(instance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "snake_case")]
pub enum AlgoSpec {
    Efbo(EfboSpec),
    Corral(CorralConfig),
}

fn default_replications() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSource,
    pub algo: AlgoSpec,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 8 {
            return Err(CbusError::config(format!("T must be at least 8, got {}", self.horizon)));
        }
        if self.replications == 0 {
            return Err(CbusError::config("replications must be at least 1"));
        }
        if let AlgoSpec::Corral(c) = &self.algo {
            c.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CbusError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
