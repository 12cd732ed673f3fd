//! Depth metrics and the evaluation protocol.
//!
//! Fisheye evaluation warps every test scene through its own held-out
//! calibration, predicts on the fisheye image, warps the prediction back to the
//! perspective frame and scores it against the rendered depth there. No scale
//! or shift alignment is applied.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::Scene;
use crate::error::{Error, MetricError};
use crate::geometry::{sample_random_calibration, PinholeIntrinsics, SamplingConfig};
use crate::objective::LossFrame;
use crate::remap::{apply_warp, apply_warp_depth, build_warp_field_with, DepthMap, Interpolation, WarpDirection};
use crate::tinyvit::{forward, ModelWeights, TokenSet};

/// δ₁ threshold on the max-ratio.
pub const DELTA1_THRESHOLD: f64 = 1.25;

fn joint<'a>(pred: &'a DepthMap, gt: &'a DepthMap) -> impl Iterator<Item = (f64, f64)> + 'a {
    assert_eq!(pred.dims(), gt.dims(), "metric operands must share dimensions");
    pred.depth
        .iter()
        .zip(&gt.depth)
        .zip(pred.mask.iter().zip(&gt.mask))
        .filter(|(_, (a, b))| **a && **b)
        .map(|((&p, &g), _)| (p, g))
}

/// Number of jointly valid pixels.
pub fn joint_count(pred: &DepthMap, gt: &DepthMap) -> usize {
    joint(pred, gt).count()
}

/// Root mean squared error over jointly valid pixels.
pub fn rmse(pred: &DepthMap, gt: &DepthMap) -> Result<f64, MetricError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in joint(pred, gt) {
        sum += (p - g) * (p - g);
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(libm::sqrt(sum / n as f64))
}

/// Fraction of jointly valid pixels with `max(p/g, g/p) < 1.25`.
pub fn delta1(pred: &DepthMap, gt: &DepthMap) -> Result<f64, MetricError> {
    let (mut hits, mut n) = (0usize, 0usize);
    for (p, g) in joint(pred, gt) {
        if !(p > 0.0) {
            return Err(MetricError::NonPositiveDepth(p));
        }
        if !(g > 0.0) {
            return Err(MetricError::NonPositiveDepth(g));
        }
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub index: usize,
    pub rmse: f64,
    pub delta1: f64,
    pub n_pixels: usize,
}

/// Aggregate report: `rmse` and `delta1` are means of the per-image values,
/// `n_pixels` is the total number of scored pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub delta1: f64,
    pub n_pixels: usize,
    pub per_image: Vec<ImageEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    /// Score the model on the perspective images as they are.
    Perspective,
    /// Distort scene `i` with the calibration drawn from `seeds[i]`.
    Fisheye { seeds: Vec<u64>, frame: LossFrame },
}

/// Everything needed to score one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrediction {
    /// Prediction in the scoring frame.
    pub pred: DepthMap,
    /// Ground truth in the scoring frame.
    pub gt: DepthMap,
}

/// First held-out distortion seed. Token training draws its distortion seeds
/// below `2^32`, so evaluation seeds from here on never repeat one.
pub const HELDOUT_SEED_BASE: u64 = 1 << 40;

/// `count` consecutive distortion seeds starting at `base`.
pub fn heldout_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Predicts scene `index` under `mode` and returns prediction and ground truth
/// in the scoring frame.
pub fn predict_scene(
    model: &ModelWeights,
    tokens: Option<&TokenSet>,
    scene: &Scene,
    index: usize,
    pinhole: &PinholeIntrinsics,
    mode: &EvalMode,
) -> Result<ScenePrediction, Error> {
    match mode {
        EvalMode::Perspective => Ok(ScenePrediction {
            pred: forward(model, &scene.image, tokens)?,
            gt: scene.depth.clone(),
        }),
        EvalMode::Fisheye { seeds, frame } => {
            let size = model.config.image_size;
            let fe = sample_random_calibration(seeds[index], &SamplingConfig::new(size, size))?;
            let lens = fe.lens()?;
            let to_fisheye = build_warp_field_with(WarpDirection::ToFisheye, pinhole, &lens);
            let (fisheye, _) = apply_warp(&scene.image, &to_fisheye, Interpolation::Bilinear)?;
            let pred_f = forward(model, &fisheye, tokens)?;
            match frame {
                LossFrame::Perspective => {
                    let to_perspective = build_warp_field_with(WarpDirection::ToPerspective, pinhole, &lens);
                    Ok(ScenePrediction {
                        pred: apply_warp_depth(&pred_f, &to_perspective)?,
                        gt: scene.depth.clone(),
                    })
                }
                LossFrame::Fisheye => Ok(ScenePrediction {
                    gt: apply_warp_depth(&scene.depth, &to_fisheye)?,
                    pred: pred_f,
                }),
            }
        }
    }
}

/// Evaluates `model` (optionally with tokens) on `scenes`.
pub fn evaluate(
    model: &ModelWeights,
    tokens: Option<&TokenSet>,
    scenes: &[Scene],
    pinhole: &PinholeIntrinsics,
    mode: &EvalMode,
) -> Result<EvalReport, Error> {
    if let EvalMode::Fisheye { seeds, .. } = mode {
        if seeds.len() < scenes.len() {
            return Err(crate::error::ShapeError::ShapeMismatch {
                what: "distortion seeds",
                expected: scenes.len(),
                actual: seeds.len(),
            }
            .into());
        }
    }
    let mut per_image = Vec::with_capacity(scenes.len());
    for (index, scene) in scenes.iter().enumerate() {
        let sp = predict_scene(model, tokens, scene, index, pinhole, mode)?;
        per_image.push(ImageEval {
            index,
            rmse: rmse(&sp.pred, &sp.gt)?,
            delta1: delta1(&sp.pred, &sp.gt)?,
            n_pixels: joint_count(&sp.pred, &sp.gt),
        });
    }
    Ok(summarize(per_image))
}

/// Aggregates per-image results in index order.
pub fn summarize(per_image: Vec<ImageEval>) -> EvalReport {
    let n = per_image.len().max(1) as f64;
    EvalReport {
        rmse: per_image.iter().map(|e| e.rmse).sum::<f64>() / n,
        delta1: per_image.iter().map(|e| e.delta1).sum::<f64>() / n,
        n_pixels: per_image.iter().map(|e| e.n_pixels).sum(),
        per_image,
    }
}
