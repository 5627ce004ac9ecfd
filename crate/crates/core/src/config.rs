//! The run configuration file.
//!
//! Every key has a default and unknown keys are rejected. Sections:
//! `[data]`, `[generator]`, `[generator.xdog]`, `[model]`, `[schedule]`,
//! `[train]` and `[eval]`; `seed` sits at the top level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::pipeline::TrainConfig;
use crate::synthgen::GenConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_clips: usize,
    pub test_clips: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_clips: 512,
            test_clips: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; training and sampling refuse to run without one.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub generator: GenConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn emit(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_some_and(|s| s > i64::MAX as u64) {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let (g, m) = (&self.generator, &self.model);
        if (g.frames, g.height, g.width) != (m.frames, m.height, m.width) {
            return Err(Error::Config(format!(
                "generator clips are {}x{}x{} but the model expects {}x{}x{}",
                g.frames, g.height, g.width, m.frames, m.height, m.width
            )));
        }
        let t = self.schedule.t_steps;
        if t == 0 || self.schedule.sample_steps == 0 || t % self.schedule.sample_steps != 0 {
            return Err(Error::Config(format!(
                "schedule.sample_steps ({}) must divide t_steps ({t})",
                self.schedule.sample_steps
            )));
        }
        Ok(())
    }

    /// The master seed, or a configuration error naming `what` needs it.
    pub fn require_seed(&self, what: &str) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config(format!("{what} needs a seed (--seed or `seed` in the config)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let text = c.emit().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn edited_config_roundtrips() {
        let mut c = RunConfig {
            seed: Some(42),
            ..Default::default()
        };
        c.generator.force_spawn = Some(3);
        c.model.d = 64;
        c.train.iterations = [1, 2, 3, 4];
        c.eval.sample_steps = 10;
        let back = RunConfig::parse(&c.emit().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::parse("seed = 7\n[train]\nbatch_size = 4\n[generator.xdog]\nsigma = 1.2\n").unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.lr, TrainConfig::default().lr);
        assert_eq!(c.generator.xdog.sigma, 1.2);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "sede = 1",
            "[train]\nbatchsize = 4",
            "[model]\nheight = 16",
            "[schedule]\nsample_steps = 7",
            "[train]\nlr = -1.0",
            "[unknown]\nx = 1",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        assert!(RunConfig::default().require_seed("train").is_err());
    }
}
