//! Undo-warp losses, Adam, and the two training loops.

mod adam;
mod train;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::remap::DepthMap;

pub use adam::{adam_update, OptimState};
pub use train::{
    make_training_example, pretrain_fmde, token_gradient, token_training_step, train_tokens, train_tokens_with, PretrainConfig,
    TokenTrainConfig, TrainLogRow, TrainingExample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean of `log(|a - b| + 1)`.
    LogL1,
    /// Mean of `|a - b|`.
    L1,
}

/// Frame in which the token-training loss is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFrame {
    /// Warp the fisheye prediction back to the perspective frame.
    Perspective,
    /// Warp the perspective target into the fisheye frame.
    Fisheye,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// The frozen model's own prediction on the perspective image.
    Pseudo,
    /// The scene's rendered depth.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub frame: LossFrame,
    pub supervision: Supervision,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::LogL1,
            frame: LossFrame::Perspective,
            supervision: Supervision::Pseudo,
        }
    }
}

/// A scalar loss and its gradient with respect to every pixel of the first
/// argument (zero outside the joint mask).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub adjoint: Vec<f64>,
    pub count: usize,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn masked_loss(a: &DepthMap, b: &DepthMap, per_pixel: impl Fn(f64) -> (f64, f64)) -> Result<LossValue, MetricError> {
    assert_eq!(a.dims(), b.dims(), "loss operands must share dimensions");
    let count = a.mask.iter().zip(&b.mask).filter(|(x, y)| **x && **y).count();
    if count == 0 {
        return Err(MetricError::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    let mut adjoint = vec![0.0; a.len()];
    for i in 0..a.len() {
        if a.mask[i] && b.mask[i] {
            let (v, g) = per_pixel(a.depth[i] - b.depth[i]);
            sum += v;
            adjoint[i] = g * inv;
        }
    }
    Ok(LossValue {
        value: sum * inv,
        adjoint,
        count,
    })
}

/// Mean of `log(|a - b| + 1)` over jointly valid pixels; the adjoint is taken
/// with respect to `a`.
pub fn logl1_loss(a: &DepthMap, b: &DepthMap) -> Result<LossValue, MetricError> {
    masked_loss(a, b, |d| {
        let ad = libm::fabs(d);
        (libm::log1p(ad), sign(d) / (ad + 1.0))
    })
}

/// Mean of `|a - b|` over jointly valid pixels; the adjoint is taken with
/// respect to `a`, with `sign(0) = 0`.
pub fn l1_loss(a: &DepthMap, b: &DepthMap) -> Result<LossValue, MetricError> {
    masked_loss(a, b, |d| (libm::fabs(d), sign(d)))
}

pub fn loss(kind: LossKind, a: &DepthMap, b: &DepthMap) -> Result<LossValue, MetricError> {
    match kind {
        LossKind::LogL1 => logl1_loss(a, b),
        LossKind::L1 => l1_loss(a, b),
    }
}
