//! Run configuration: one TOML file with `[sim]`, `[physics]`, `[model]`,
//! `[train]` and `[eval]` sections. Missing keys take their defaults;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ExperimentConfig, Method};
use crate::model::ModelConfig;
use crate::physics::PhysicsConfig;
use crate::sim::SimConfig;
use crate::train::TrainConfig;

/// File name of the resolved configuration echoed into output directories.
pub const RESOLVED_CONFIG_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub folds: usize,
    pub seed: u64,
    pub methods: Vec<String>,
    /// Overrides the MLP baseline's epoch count.
    pub mlp_epochs: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 7,
            methods: ["spycer", "mlp", "gb", "rf", "lr"].map(String::from).to_vec(),
            mlp_epochs: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub physics: PhysicsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Points every random stream at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.physics.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.sigma != self.physics.sigma {
            return Err(Error::Config(format!(
                "model.sigma ({}) and physics.sigma ({}) disagree",
                self.model.sigma, self.physics.sigma
            )));
        }
        if self.eval.folds == 0 {
            return Err(Error::Config("eval.folds must be positive".into()));
        }
        self.methods()?;
        Ok(())
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.eval.methods.is_empty() {
            return Err(Error::Config("eval.methods is empty".into()));
        }
        self.eval.methods.iter().map(|m| Method::parse(m)).collect()
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            physics: self.physics.clone(),
            train: self.train.clone(),
            mlp_epochs: self.eval.mlp_epochs,
        }
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), self.to_toml())?;
        Ok(())
    }
}
