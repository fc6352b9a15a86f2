use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::stabilize::{ClipMode, LossScalerState};
use crate::tape::CheckpointPolicy;
use crate::task::{SyntheticTask, TaskKind};
use crate::tensor::Precision;
use crate::zoo::{ModelConfig, ModelKind};

pub const DEFAULT_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup over the first `warmup_ratio` of the run, then linear
    /// decay towards zero.
    LinearDecay {
        #[serde(default)]
        warmup_ratio: f64,
    },
}

impl LrSchedule {
    /// Learning rate for 0-based `step` of `total`. Never reaches zero.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::LinearDecay { warmup_ratio } => {
                let warm = (warmup_ratio * total as f64).round() as usize;
                if step < warm {
                    base * (step + 1) as f64 / warm as f64
                } else {
                    base * (total - step) as f64 / (total - warm) as f64
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::LinearDecay { warmup_ratio } if !(0.0..1.0).contains(&warmup_ratio) => {
                Err(Error::InvalidConfig(format!(
                    "warmup_ratio must be in [0, 1), got {warmup_ratio}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Everything a training run depends on. Seeds live in the model and task
/// sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub clip: ClipMode,
    /// Enables dynamic loss scaling, starting from these values.
    #[serde(default)]
    pub scaler: Option<LossScalerState>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub checkpointing: bool,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Directory that receives reports. `LOMO_REPORT_DIR` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<PathBuf>,
}

fn default_batch() -> usize {
    DEFAULT_BATCH
}

impl RunConfig {
    /// Regression on a tanh MLP with the given optimizer; the usual small
    /// test configuration.
    pub fn regression(optimizer: OptimizerKind, steps: usize, seed: u64) -> Self {
        RunConfig {
            model: ModelConfig::mlp(2, 16, 4, seed),
            task: SyntheticTask::regression(4, seed.wrapping_add(1)),
            optimizer,
            clip: ClipMode::None,
            scaler: None,
            precision: Precision::Full,
            checkpointing: false,
            steps,
            batch: DEFAULT_BATCH,
            lr_schedule: LrSchedule::Constant,
            report_path: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn policy(&self) -> CheckpointPolicy {
        if self.checkpointing {
            CheckpointPolicy::CheckpointPerLayer
        } else {
            CheckpointPolicy::StoreAll
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        self.model.validate()?;
        self.task.validate()?;
        self.optimizer.validate()?;
        self.clip.validate()?;
        self.lr_schedule.validate()?;
        if let Some(s) = &self.scaler {
            s.validate()?;
        }
        match (self.model.kind, self.task.kind) {
            (ModelKind::Mlp, TaskKind::Regression) if self.model.input_dim == self.task.input_dim => {
                Ok(())
            }
            (ModelKind::MiniTransformer, TaskKind::SequenceCopy) if self.model.vocab == self.task.vocab => {
                Ok(())
            }
            _ => Err(Error::InvalidConfig(format!(
                "model {:?} (input_dim {}, vocab {}) does not fit task {:?} (input_dim {}, vocab {})",
                self.model.kind,
                self.model.input_dim,
                self.model.vocab,
                self.task.kind,
                self.task.input_dim,
                self.task.vocab
            ))),
        }
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring where reports go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.report_path = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
