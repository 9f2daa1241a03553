//! TOML run configuration gathering every stage's settings under one
//! file. Unknown keys are rejected so typos fail loudly.

use std::path::Path;

use crate::dataset::DatasetConfig;
use crate::error::{CoreError, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synthetic::SparsifySpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub sparsify: SparsifySpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CoreError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
            .map_err(|e| CoreError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.sparsify.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.dataset.width != self.model.encoder.image_width
            || self.dataset.height != self.model.encoder.image_height
        {
            return Err(CoreError::Config(format!(
                "dataset {}x{} does not match model input {}x{}",
                self.dataset.width,
                self.dataset.height,
                self.model.encoder.image_width,
                self.model.encoder.image_height
            )));
        }
        if self.dataset.num_classes != self.model.head.num_classes {
            return Err(CoreError::Config(format!(
                "dataset has {} classes, head {}",
                self.dataset.num_classes, self.model.head.num_classes
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Parse(e.to_string()))
    }
}
