use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::psp::PspConfig;
use crate::tensor::AdamWConfig;

/// How per-class loss weights are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// `c_y = total / (2 · count_y)` on the training split.
    #[default]
    InverseFrequency,
    Uniform,
}

/// Which epochs may supply the best-validation model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Every epoch.
    #[default]
    EveryEpoch,
    /// Only epochs that ended with a prototype projection, plus the last one.
    ProjectionEpochs,
}

/// `train.*` keys of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Project prototypes after every this many epochs.
    pub projection_period: usize,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
    pub selection: Selection,
    /// Learning rate of the scaler logits; `null` means `learning_rate`.
    pub scaler_learning_rate: Option<f64>,
    /// Keep the encoder fixed for this many epochs.
    pub encoder_warmup_epochs: usize,
    /// Keep the scaler logits fixed (uniform weights) for this many epochs.
    pub scaler_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            projection_period: 5,
            seed: 0,
            class_weighting: ClassWeighting::InverseFrequency,
            selection: Selection::EveryEpoch,
            scaler_learning_rate: None,
            encoder_warmup_epochs: 0,
            scaler_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("train.batch_size must be at least 1".into()));
        }
        if self.projection_period == 0 {
            return Err(Error::Invalid(
                "train.projection_period must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "train.learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if let Some(lr) = self.scaler_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Invalid(format!(
                    "train.scaler_learning_rate {lr} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Optimizer settings of the scaler logits.
    pub fn scaler_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.scaler_learning_rate.unwrap_or(self.learning_rate),
            ..self.optimizer()
        }
    }
}

/// `data.*` keys of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Z-score features with the manifest's training statistics.
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { normalize: true }
    }
}

/// Complete run configuration. Every section and key is optional in the
/// file; missing keys take their defaults and unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub psp: PspConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Invalid(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c: RunConfig = crate::io::read_json(path)?;
        c.validate()?;
        Ok(c)
    }
}
