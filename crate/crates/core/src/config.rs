//! Run configuration, read from JSON with sections `data`, `model`, `optim`,
//! `ablation` and `output`. Every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balance::OptimizerConfig;
use crate::dataset::{self, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset file; mutually exclusive with `synth`.
    pub path: Option<PathBuf>,
    /// Inline generator spec, used when no path is given.
    pub synth: Option<SynthSpec>,
    /// Held-out share of conversations.
    pub holdout: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synth: None,
            holdout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
    pub ablation: Ablation,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.path.is_some() && self.data.synth.is_some() {
            return Err(Error::config(
                "data",
                "give either `path` or `synth`, not both",
            ));
        }
        if !(0.0..1.0).contains(&self.data.holdout) {
            return Err(Error::config("data.holdout", "must lie in [0, 1)"));
        }
        if let Some(spec) = &self.data.synth {
            spec.validate()?;
        }
        self.model.validate()?;
        self.optim.validate()
    }

    /// Replaces the training seed and, for generated data, the data seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.optim.seed = seed;
        if let Some(spec) = &mut self.data.synth {
            spec.seed = seed;
        }
    }

    /// Loads or generates the full dataset.
    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data.path, &self.data.synth) {
            (Some(p), _) => Dataset::load(p),
            (None, Some(spec)) => dataset::generate(spec),
            (None, None) => dataset::generate(&SynthSpec::default()),
        }
    }

    /// Deterministic conversation-level (train, held-out) split.
    pub fn split(&self, data: &Dataset) -> (Dataset, Dataset) {
        let (train, test) =
            dataset::holdout_split(data.conversations.len(), self.data.holdout, self.optim.seed);
        (data.subset(&train), data.subset(&test))
    }
}
