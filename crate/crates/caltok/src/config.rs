//! Training configuration documents shared by `pretrain` and `adapt`.

use std::path::PathBuf;

use caltok_core::geometry::{PinholeIntrinsics, SamplingConfig};
use caltok_core::objective::{LossConfig, LossFrame, LossKind, PretrainConfig, Supervision, TokenTrainConfig};
use caltok_core::tinyvit::{InjectionMode, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CaltokError, Result};

pub const PRETRAIN_LR: f64 = 1e-3;
pub const ADAPT_LR: f64 = 1e-4;

fn default_iterations() -> usize {
    2000
}

fn default_batch() -> usize {
    4
}

fn default_tokens_per_layer() -> usize {
    8
}

fn default_loss() -> LossKind {
    LossConfig::default().kind
}

fn default_frame() -> LossFrame {
    LossConfig::default().frame
}

fn default_supervision() -> Supervision {
    LossConfig::default().supervision
}

fn default_mode() -> InjectionMode {
    InjectionMode::Layerwise
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Adam learning rate; defaults to 1e-3 for pretraining and 1e-4 for
    /// token adaptation.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_frame")]
    pub frame: LossFrame,
    #[serde(default = "default_supervision")]
    pub supervision: Supervision,
    #[serde(default)]
    pub model: ModelConfig,
    /// Dataset root; `--data` on the command line takes precedence.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: InjectionMode,
    #[serde(default = "default_tokens_per_layer")]
    pub tokens_per_layer: usize,
    #[serde(default)]
    pub zero_init: bool,
    /// Evaluate held-out fisheye RMSE every this many steps (0 disables).
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CaltokError::Config(e.to_string()))?;
        if self.batch == 0 || self.tokens_per_layer == 0 {
            return Err(CaltokError::Config("batch and tokens_per_layer must be positive".into()));
        }
        if self.lr.is_some_and(|lr| !(lr >= 0.0 && lr.is_finite())) {
            return Err(CaltokError::Config("lr must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            iterations: self.iterations,
            batch: self.batch,
            lr: self.lr.unwrap_or(PRETRAIN_LR),
            loss: self.loss,
            model: self.model,
        }
    }

    pub fn adapt(&self, pinhole: PinholeIntrinsics) -> TokenTrainConfig {
        let size = self.model.image_size;
        let mut cfg = TokenTrainConfig::new(pinhole, SamplingConfig::new(size, size));
        cfg.seed = self.seed;
        cfg.iterations = self.iterations;
        cfg.batch = self.batch;
        cfg.lr = self.lr.unwrap_or(ADAPT_LR);
        cfg.mode = self.mode;
        cfg.tokens_per_layer = self.tokens_per_layer;
        cfg.zero_init = self.zero_init;
        cfg.loss = LossConfig {
            kind: self.loss,
            frame: self.frame,
            supervision: self.supervision,
        };
        cfg
    }
}
