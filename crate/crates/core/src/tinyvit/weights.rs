use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::error::ShapeError;

pub(crate) const INIT_STD: f64 = 0.02;

/// Normal(0, std²) truncated to ±2 std by rejection.
pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if libm::fabs(z) <= 2.0 {
            return z * std;
        }
    }
}

/// Affine map `y = x·W + b` with `W` stored row-major as `inputs × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Self::zeros(inputs, outputs);
        l.weight.iter_mut().for_each(|w| *w = truncated_normal(rng, INIT_STD));
        l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn new(dim: usize, gain: f64) -> Self {
        Self {
            gamma: vec![gain; dim],
            beta: vec![0.0; dim],
        }
    }
}

/// One pre-norm encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Encoder weights (patch embedding, positional embedding, blocks) and the
/// decoder (final norm and per-patch head).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub pos_embed: Vec<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

/// A named, shaped view into one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Deterministic initialization: truncated normal (std 0.02) for projections
/// and positional embeddings, zero biases, unit layer-norm gains.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights, ShapeError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = cfg.embed_dim;
    let patch_embed = Linear::init(cfg.patch_dim(), f, &mut rng);
    let pos_embed = (0..cfg.num_patches() * f).map(|_| truncated_normal(&mut rng, INIT_STD)).collect();
    let blocks = (0..cfg.layers)
        .map(|_| Block {
            ln1: LayerNorm::new(f, 1.0),
            qkv: Linear::init(f, 3 * f, &mut rng),
            proj: Linear::init(f, f, &mut rng),
            ln2: LayerNorm::new(f, 1.0),
            fc1: Linear::init(f, cfg.hidden_dim(), &mut rng),
            fc2: Linear::init(cfg.hidden_dim(), f, &mut rng),
        })
        .collect();
    Ok(ModelWeights {
        config: *cfg,
        patch_embed,
        pos_embed,
        blocks,
        ln_f: LayerNorm::new(f, 1.0),
        head: Linear::init(f, 1, &mut rng),
    })
}

impl ModelWeights {
    /// Same shapes, all entries zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.params_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Every tensor with its name and shape, in a fixed order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        push_linear(&mut out, "patch_embed", &self.patch_embed);
        out.push(NamedTensor {
            name: "pos_embed".into(),
            shape: vec![self.config.num_patches(), self.config.embed_dim],
            data: &self.pos_embed,
        });
        for (i, b) in self.blocks.iter().enumerate() {
            push_norm(&mut out, &format!("blocks.{i}.ln1"), &b.ln1);
            push_linear(&mut out, &format!("blocks.{i}.qkv"), &b.qkv);
            push_linear(&mut out, &format!("blocks.{i}.proj"), &b.proj);
            push_norm(&mut out, &format!("blocks.{i}.ln2"), &b.ln2);
            push_linear(&mut out, &format!("blocks.{i}.fc1"), &b.fc1);
            push_linear(&mut out, &format!("blocks.{i}.fc2"), &b.fc2);
        }
        push_norm(&mut out, "ln_f", &self.ln_f);
        push_linear(&mut out, "head", &self.head);
        out
    }

    /// Mutable views in the same order as [`ModelWeights::tensors`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(&mut self.patch_embed.weight);
        out.push(&mut self.patch_embed.bias);
        out.push(&mut self.pos_embed);
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            out.push(&mut b.qkv.weight);
            out.push(&mut b.qkv.bias);
            out.push(&mut b.proj.weight);
            out.push(&mut b.proj.bias);
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            out.push(&mut b.fc1.weight);
            out.push(&mut b.fc1.bias);
            out.push(&mut b.fc2.weight);
            out.push(&mut b.fc2.bias);
        }
        out.push(&mut self.ln_f.gamma);
        out.push(&mut self.ln_f.beta);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.tensors().into_iter().map(|t| t.data).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Rounds every weight to the nearest `f32`, the precision of checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in self.params_mut() {
            t.iter_mut().for_each(|w| *w = *w as f32 as f64);
        }
    }

    /// Rebuilds weights from tensors listed in [`ModelWeights::tensors`] order.
    pub fn from_tensors(config: ModelConfig, tensors: &[Vec<f64>]) -> Result<Self, ShapeError> {
        let mut model = init_model(&config, 0)?;
        let mut slots = model.params_mut();
        if slots.len() != tensors.len() {
            return Err(ShapeError::ShapeMismatch {
                what: "tensor count",
                expected: slots.len(),
                actual: tensors.len(),
            });
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            if slot.len() != t.len() {
                return Err(ShapeError::ShapeMismatch {
                    what: "tensor length",
                    expected: slot.len(),
                    actual: t.len(),
                });
            }
            slot.copy_from_slice(t);
        }
        drop(slots);
        Ok(model)
    }
}

fn tensor<'a>(name: String, shape: Vec<usize>, data: &'a [f64]) -> NamedTensor<'a> {
    NamedTensor { name, shape, data }
}

fn push_linear<'a>(out: &mut Vec<NamedTensor<'a>>, name: &str, l: &'a Linear) {
    out.push(tensor(format!("{name}.weight"), vec![l.inputs, l.outputs], &l.weight));
    out.push(tensor(format!("{name}.bias"), vec![l.outputs], &l.bias));
}

fn push_norm<'a>(out: &mut Vec<NamedTensor<'a>>, name: &str, n: &'a LayerNorm) {
    out.push(tensor(format!("{name}.gamma"), vec![n.gamma.len()], &n.gamma));
    out.push(tensor(format!("{name}.beta"), vec![n.beta.len()], &n.beta));
}
