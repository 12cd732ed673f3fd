use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_update, OptimState};
use super::{loss, LossConfig, LossFrame, LossKind, Supervision};
use crate::datagen::Scene;
use crate::error::{Error, ShapeError};
use crate::geometry::{sample_random_calibration, FisheyeCalibration, PinholeIntrinsics, SamplingConfig};
use crate::remap::{
    apply_warp, apply_warp_depth, build_warp_field_with, scatter_depth_adjoint, DepthMap, ImageBuffer, Interpolation, WarpDirection,
    WarpField,
};
use crate::tinyvit::backward::forward_backward_with;
use crate::tinyvit::{forward, forward_backward_full, init_model, InjectionMode, ModelConfig, ModelWeights, TokenInit, TokenSet};

/// One synthesized fisheye view of a perspective scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Fisheye rendering of the scene image.
    pub image: ImageBuffer,
    /// Supervision target in the perspective frame.
    pub target: DepthMap,
    pub calibration: FisheyeCalibration,
    /// Fisheye output grid, perspective source.
    pub to_fisheye: WarpField,
    /// Perspective output grid, fisheye source.
    pub to_perspective: WarpField,
}

fn pseudo_or_truth(model: &ModelWeights, scene: &Scene, supervision: Supervision) -> Result<DepthMap, Error> {
    Ok(match supervision {
        Supervision::Pseudo => forward(model, &scene.image, None)?,
        Supervision::GroundTruth => scene.depth.clone(),
    })
}

fn example_with_target(
    scene: &Scene,
    target: DepthMap,
    pinhole: &PinholeIntrinsics,
    fe_seed: u64,
    sampling: &SamplingConfig,
) -> Result<TrainingExample, Error> {
    let calibration = sample_random_calibration(fe_seed, sampling)?;
    let lens = calibration.lens()?;
    let to_fisheye = build_warp_field_with(WarpDirection::ToFisheye, pinhole, &lens);
    let to_perspective = build_warp_field_with(WarpDirection::ToPerspective, pinhole, &lens);
    let (image, _) = apply_warp(&scene.image, &to_fisheye, Interpolation::Bilinear)?;
    Ok(TrainingExample {
        image,
        target,
        calibration,
        to_fisheye,
        to_perspective,
    })
}

/// Distorts `scene` with the calibration drawn from `fe_seed` and attaches the
/// requested target.
pub fn make_training_example(
    scene: &Scene,
    model: &ModelWeights,
    pinhole: &PinholeIntrinsics,
    fe_seed: u64,
    sampling: &SamplingConfig,
    supervision: Supervision,
) -> Result<TrainingExample, Error> {
    let target = pseudo_or_truth(model, scene, supervision)?;
    example_with_target(scene, target, pinhole, fe_seed, sampling)
}

/// Loss value and token gradient for one example. The model is not touched.
pub fn token_gradient(
    model: &ModelWeights,
    tokens: &TokenSet,
    example: &TrainingExample,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), Error> {
    let mut value = 0.0;
    let grads = forward_backward_with(model, &example.image, Some(tokens), false, |pred| match cfg.frame {
        LossFrame::Perspective => {
            let undone = apply_warp_depth(pred, &example.to_perspective)?;
            let l = loss(cfg.kind, &undone, &example.target)?;
            value = l.value;
            Ok(scatter_depth_adjoint(&example.to_perspective, pred, &l.adjoint)?)
        }
        LossFrame::Fisheye => {
            let warped_target = apply_warp_depth(&example.target, &example.to_fisheye)?;
            let l = loss(cfg.kind, pred, &warped_target)?;
            value = l.value;
            Ok(l.adjoint)
        }
    })?;
    Ok((value, grads.tokens.unwrap_or_default()))
}

/// Averages token gradients over `batch` in order and applies one Adam step to
/// the tokens. Returns the mean loss.
pub fn token_training_step(
    model: &ModelWeights,
    tokens: &mut TokenSet,
    batch: &[TrainingExample],
    cfg: &LossConfig,
    opt: &mut OptimState,
) -> Result<f64, Error> {
    if batch.is_empty() {
        return Err(ShapeError::InvalidConfig("empty batch").into());
    }
    let mut total = vec![0.0; tokens.values.len()];
    let mut value = 0.0;
    for example in batch {
        let (v, g) = token_gradient(model, tokens, example, cfg)?;
        value += v;
        total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
    }
    let scale = 1.0 / batch.len() as f64;
    total.iter_mut().for_each(|t| *t *= scale);
    adam_update(&mut [&mut tokens.values], &[&total], opt)?;
    Ok(value * scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub model: ModelConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            batch: 8,
            lr: 1e-3,
            loss: LossKind::LogL1,
            model: ModelConfig::default(),
        }
    }
}

/// Supervised training of every weight on perspective scenes. Returns the
/// weights rounded to `f32` and the per-step mean batch loss.
pub fn pretrain_fmde(scenes: &[Scene], cfg: &PretrainConfig) -> Result<(ModelWeights, Vec<f64>), Error> {
    if scenes.is_empty() || cfg.batch == 0 {
        return Err(ShapeError::InvalidConfig("pretraining needs scenes and a positive batch").into());
    }
    let mut model = init_model(&cfg.model, cfg.seed)?;
    let lengths: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut opt = OptimState::new(cfg.lr, &lengths);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut acc = model.zeros_like();
        let mut value = 0.0;
        for _ in 0..cfg.batch {
            let scene = &scenes[rng.random_range(0..scenes.len())];
            let (v, g) = forward_backward_full(&model, &scene.image, &scene.depth, cfg.loss)?;
            value += v;
            for (a, g) in acc.params_mut().into_iter().zip(g.params()) {
                a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
        let scale = 1.0 / cfg.batch as f64;
        let mut grads = acc.params_mut();
        grads.iter_mut().for_each(|t| t.iter_mut().for_each(|g| *g *= scale));
        let grads: Vec<&[f64]> = grads.into_iter().map(|t| &*t).collect();
        adam_update(&mut model.params_mut(), &grads, &mut opt)?;
        losses.push(value * scale);
    }
    model.round_to_f32();
    Ok((model, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub mode: InjectionMode,
    pub tokens_per_layer: usize,
    /// Zero-initialized tokens instead of the truncated normal.
    pub zero_init: bool,
    pub loss: LossConfig,
    pub sampling: SamplingConfig,
    pub pinhole: PinholeIntrinsics,
}

impl TokenTrainConfig {
    pub fn new(pinhole: PinholeIntrinsics, sampling: SamplingConfig) -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            batch: 4,
            lr: 1e-4,
            mode: InjectionMode::Layerwise,
            tokens_per_layer: 8,
            zero_init: false,
            loss: LossConfig::default(),
            sampling,
            pinhole,
        }
    }

    pub fn init(&self) -> TokenInit {
        if self.zero_init {
            TokenInit::Zeros
        } else {
            TokenInit::TruncatedNormal { seed: self.seed }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub rmse_eval: Option<f64>,
}

/// [`train_tokens_with`] without periodic evaluation.
pub fn train_tokens(model: &ModelWeights, scenes: &[Scene], cfg: &TokenTrainConfig) -> Result<(TokenSet, Vec<TrainLogRow>), Error> {
    train_tokens_with(model, scenes, cfg, |_, _| None)
}

/// Trains calibration tokens against the frozen `model`. Every step draws
/// `batch` fresh (scene, calibration) pairs. `monitor` may return an
/// evaluation RMSE to log after each step. The returned tokens are rounded to
/// `f32`.
pub fn train_tokens_with(
    model: &ModelWeights,
    scenes: &[Scene],
    cfg: &TokenTrainConfig,
    mut monitor: impl FnMut(usize, &TokenSet) -> Option<f64>,
) -> Result<(TokenSet, Vec<TrainLogRow>), Error> {
    if scenes.is_empty() || cfg.batch == 0 || cfg.tokens_per_layer == 0 {
        return Err(ShapeError::InvalidConfig("token training needs scenes, a positive batch and tokens").into());
    }
    let mut tokens = TokenSet::new(&model.config, cfg.mode, cfg.tokens_per_layer, cfg.init());
    let mut opt = OptimState::new(cfg.lr, &[tokens.values.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut targets: Vec<Option<DepthMap>> = vec![None; scenes.len()];
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let index = rng.random_range(0..scenes.len());
            let fe_seed = u64::from(rng.random::<u32>());
            let target = match &targets[index] {
                Some(t) => t.clone(),
                None => {
                    let t = pseudo_or_truth(model, &scenes[index], cfg.loss.supervision)?;
                    targets[index] = Some(t.clone());
                    t
                }
            };
            batch.push(example_with_target(&scenes[index], target, &cfg.pinhole, fe_seed, &cfg.sampling)?);
        }
        let loss = token_training_step(model, &mut tokens, &batch, &cfg.loss, &mut opt)?;
        let rmse_eval = monitor(step, &tokens);
        log.push(TrainLogRow { step, loss, rmse_eval });
    }
    tokens.round_to_f32();
    Ok((tokens, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scenes, SceneSpec};

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            layers: 2,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            channels: 3,
        }
    }

    fn setup() -> (ModelWeights, Vec<Scene>, PinholeIntrinsics, SamplingConfig) {
        let cfg = small_config();
        let pin = PinholeIntrinsics::centered(16, 5.0);
        let scenes = generate_scenes(&SceneSpec::new(3, pin), 0, 4);
        (init_model(&cfg, 5).unwrap(), scenes, pin, SamplingConfig::new(16, 16))
    }

    #[test]
    fn pseudo_target_is_the_frozen_prediction() {
        let (model, scenes, pin, sampling) = setup();
        let ex = make_training_example(&scenes[0], &model, &pin, 9, &sampling, Supervision::Pseudo).unwrap();
        assert_eq!(ex.target, forward(&model, &scenes[0].image, None).unwrap());
        let gt = make_training_example(&scenes[0], &model, &pin, 9, &sampling, Supervision::GroundTruth).unwrap();
        assert_eq!(gt.target, scenes[0].depth);
    }

    #[test]
    fn examples_are_deterministic() {
        let (model, scenes, pin, sampling) = setup();
        let a = make_training_example(&scenes[1], &model, &pin, 4, &sampling, Supervision::Pseudo).unwrap();
        let b = make_training_example(&scenes[1], &model, &pin, 4, &sampling, Supervision::Pseudo).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn near_pinhole_example_matches_the_input() {
        let (model, scenes, pin, _) = setup();
        // A tiny field of view with vanishing distortion coefficients.
        let sampling = SamplingConfig {
            theta_max: (0.05, 0.05),
            k2: (-1e-9, -1e-9),
            k3: (-1e-9, -1e-9),
            k4: (-1e-9, -1e-9),
            ..SamplingConfig::new(16, 16)
        };
        let scene = &scenes[0];
        let narrow = PinholeIntrinsics::centered(16, 8.0 / libm::tan(0.05));
        let ex = make_training_example(scene, &model, &narrow, 1, &sampling, Supervision::Pseudo).unwrap();
        let mut max_diff = 0.0f32;
        for i in 0..256 {
            if ex.to_fisheye.mask[i] {
                for c in 0..3 {
                    max_diff = max_diff.max((ex.image.data[i * 3 + c] - scene.image.data[i * 3 + c]).abs());
                }
            }
        }
        assert!(max_diff < 0.02, "{max_diff}");
        let _ = pin;
    }

    #[test]
    fn zero_learning_rate_keeps_tokens() {
        let (model, scenes, pin, sampling) = setup();
        let ex = make_training_example(&scenes[0], &model, &pin, 2, &sampling, Supervision::GroundTruth).unwrap();
        for mode in [InjectionMode::Layerwise, InjectionMode::Single, InjectionMode::Shared] {
            let mut tokens = TokenSet::new(&model.config, mode, 3, TokenInit::TruncatedNormal { seed: 1 });
            let before = tokens.clone();
            let mut opt = OptimState::new(0.0, &[tokens.values.len()]);
            let value = token_training_step(&model, &mut tokens, &[ex.clone()], &LossConfig::default(), &mut opt).unwrap();
            assert!(value.is_finite());
            assert_eq!(tokens, before);
        }
    }

    #[test]
    fn zero_adjoint_step_keeps_tokens() {
        // The pseudo target equals the prediction when the warp is the
        // identity and no tokens perturb the model, so the gradient is zero.
        let (model, scenes, _, _) = setup();
        let n = 16;
        let mut tokens = TokenSet::new(&model.config, InjectionMode::Layerwise, 2, TokenInit::Zeros);
        let with_tokens = forward(&model, &scenes[0].image, Some(&tokens)).unwrap();
        let ex = TrainingExample {
            image: scenes[0].image.clone(),
            target: with_tokens,
            calibration: sample_random_calibration(0, &SamplingConfig::new(n, n)).unwrap(),
            to_fisheye: WarpField::identity(n, n, WarpDirection::ToFisheye),
            to_perspective: WarpField::identity(n, n, WarpDirection::ToPerspective),
        };
        let before = tokens.clone();
        let mut opt = OptimState::with_defaults(&[tokens.values.len()]);
        let value = token_training_step(&model, &mut tokens, &[ex], &LossConfig::default(), &mut opt).unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(tokens, before);
    }

    #[test]
    fn perspective_frame_gradient_matches_finite_differences() {
        let (model, scenes, pin, sampling) = setup();
        let ex = make_training_example(&scenes[2], &model, &pin, 11, &sampling, Supervision::GroundTruth).unwrap();
        let tokens = TokenSet::new(&model.config, InjectionMode::Layerwise, 2, TokenInit::TruncatedNormal { seed: 3 });
        for frame in [LossFrame::Perspective, LossFrame::Fisheye] {
            let cfg = LossConfig {
                kind: LossKind::LogL1,
                frame,
                supervision: Supervision::GroundTruth,
            };
            let (_, grad) = token_gradient(&model, &tokens, &ex, &cfg).unwrap();
            for i in (0..tokens.values.len()).step_by(5) {
                let eps = 1e-6;
                let mut plus = tokens.clone();
                plus.values[i] += eps;
                let mut minus = tokens.clone();
                minus.values[i] -= eps;
                let fp = token_gradient(&model, &plus, &ex, &cfg).unwrap().0;
                let fm = token_gradient(&model, &minus, &ex, &cfg).unwrap().0;
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - grad[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "{frame:?} {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn token_training_leaves_weights_untouched() {
        let (model, scenes, pin, sampling) = setup();
        let snapshot = model.clone();
        let mut cfg = TokenTrainConfig::new(pin, sampling);
        cfg.iterations = 3;
        cfg.batch = 2;
        cfg.tokens_per_layer = 2;
        let (tokens, log) = train_tokens(&model, &scenes, &cfg).unwrap();
        assert_eq!(model, snapshot);
        assert_eq!(log.len(), 3);
        assert_eq!(tokens.values.len(), 2 * 2 * 8);
        let again = train_tokens(&model, &scenes, &cfg).unwrap();
        assert_eq!(again.0, tokens);
    }

    #[test]
    fn fixed_example_loss_trends_down() {
        let (model, scenes, pin, sampling) = setup();
        let ex = make_training_example(&scenes[1], &model, &pin, 21, &sampling, Supervision::GroundTruth).unwrap();
        let mut tokens = TokenSet::new(&model.config, InjectionMode::Layerwise, 2, TokenInit::TruncatedNormal { seed: 2 });
        let mut opt = OptimState::new(1e-3, &[tokens.values.len()]);
        let cfg = LossConfig {
            supervision: Supervision::GroundTruth,
            ..LossConfig::default()
        };
        let losses: Vec<f64> = (0..500)
            .map(|_| token_training_step(&model, &mut tokens, &[ex.clone()], &cfg, &mut opt).unwrap())
            .collect();
        let means: Vec<f64> = losses.windows(100).step_by(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
        for pair in means.windows(2) {
            assert!(pair[1] <= pair[0], "{means:?}");
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_rounded() {
        let (_, scenes, _, _) = setup();
        let cfg = PretrainConfig {
            iterations: 5,
            batch: 2,
            model: small_config(),
            ..PretrainConfig::default()
        };
        let (a, la) = pretrain_fmde(&scenes, &cfg).unwrap();
        let (b, lb) = pretrain_fmde(&scenes, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(a.params().iter().all(|t| t.iter().all(|&v| v == v as f32 as f64)));
    }
}
