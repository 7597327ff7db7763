//! TOML experiment configuration, one table per module.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{CharacterizeConfig, GridConfig, PathChoice};
use crate::kinematics::GeomParams;
use crate::simulator::SimConfig;
use crate::trajectory::PathSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub samples: usize,
    pub seed: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self { samples: 200, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    /// Path of single `simulate` runs.
    pub path: PathSpec,
    pub grid: GridConfig,
    pub characterize: CharacterizeConfig,
    pub verify: VerifySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            path: PathChoice::Circle60.spec(&GeomParams::default(), 3.0),
            grid: GridConfig::default(),
            characterize: CharacterizeConfig::default(),
            verify: VerifySettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.grid.validate()?;
        self.characterize.validate()
    }
}
