//! Run configuration: one JSON document drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_split, Split};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::OptimConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory holding `train.json`, `eval.json` and feature folders.
    /// When absent, or when it holds no dataset yet, data are generated from `synth`.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl DataConfig {
    /// Train and eval splits from `dir` if it holds a dataset, else from `synth`.
    pub fn splits(&self) -> Result<(Split, Split)> {
        match &self.dir {
            Some(dir) if dir.join("train.json").exists() => Ok((load_split(dir, "train")?, load_split(dir, "eval")?)),
            _ => generate_dataset(&self.synth),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/default") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.data.synth.validate()?;
        self.eval.validate()?;
        if self.data.dir.is_none() {
            let s = &self.data.synth;
            if s.feature_dim != self.model.input_dim {
                return Err(Error::Config(format!(
                    "data.synth.feature_dim {} differs from model.input_dim {}",
                    s.feature_dim, self.model.input_dim
                )));
            }
            if s.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "data.synth.num_classes {} differs from model.num_classes {}",
                    s.num_classes, self.model.num_classes
                )));
            }
            if s.min_length < self.model.min_length() {
                return Err(Error::Config(format!(
                    "data.synth.min_length {} is shorter than the {} snippets model.levels needs",
                    s.min_length,
                    self.model.min_length()
                )));
            }
        }
        Ok(())
    }
}
