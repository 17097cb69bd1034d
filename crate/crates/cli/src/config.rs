//! Run configuration for `train`.

use std::path::{Path, PathBuf};

use handiff_core::diffusion::ScheduleConfig;
use handiff_core::dit::DiTConfig;
use handiff_core::train::TrainConfig;
use handiff_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DiTConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    pub seed: u64,
    /// Output directory; relative paths resolve against the config file.
    pub out: PathBuf,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DiTConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            manifest: PathBuf::from("manifest.toml"),
            seed: 0,
            out: PathBuf::from("run"),
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.out = base.join(&cfg.out);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.decay_to) {
            return Err(Error::Config("train.decay_to must lie in [0, 1]".into()));
        }
        if !(self.train.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}
