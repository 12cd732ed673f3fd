use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::weights::{truncated_normal, INIT_STD};
use super::ModelConfig;
use crate::error::ShapeError;

/// How calibration tokens enter the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionMode {
    /// A fresh token set is appended before every layer and its outputs are
    /// dropped after that layer.
    Layerwise,
    /// One token set is appended before the first layer and carried through
    /// the whole encoder.
    Single,
    /// The same token set is appended before every layer and dropped after it.
    Shared,
}

impl InjectionMode {
    /// Number of distinct `M × F` token slices the mode trains.
    pub fn slices(self, layers: usize) -> usize {
        match self {
            InjectionMode::Layerwise => layers,
            InjectionMode::Single | InjectionMode::Shared => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenInit {
    TruncatedNormal { seed: u64 },
    Zeros,
}

/// Trainable calibration tokens, stored as `slices × M × F` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub mode: InjectionMode,
    pub tokens_per_layer: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub values: Vec<f64>,
}

impl TokenSet {
    pub fn new(cfg: &ModelConfig, mode: InjectionMode, tokens_per_layer: usize, init: TokenInit) -> Self {
        let n = mode.slices(cfg.layers) * tokens_per_layer * cfg.embed_dim;
        let values = match init {
            TokenInit::Zeros => vec![0.0; n],
            TokenInit::TruncatedNormal { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect()
            }
        };
        Self {
            mode,
            tokens_per_layer,
            embed_dim: cfg.embed_dim,
            layers: cfg.layers,
            values,
        }
    }

    pub fn slices(&self) -> usize {
        self.mode.slices(self.layers)
    }

    pub fn parameter_count(&self) -> usize {
        self.values.len()
    }

    /// The `M × F` block injected at `layer` (0-based).
    pub fn slice_for_layer(&self, layer: usize) -> &[f64] {
        let idx = match self.mode {
            InjectionMode::Layerwise => layer,
            InjectionMode::Single | InjectionMode::Shared => 0,
        };
        let n = self.tokens_per_layer * self.embed_dim;
        &self.values[idx * n..(idx + 1) * n]
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ShapeError> {
        if self.embed_dim != cfg.embed_dim {
            return Err(ShapeError::ShapeMismatch {
                what: "token embed_dim",
                expected: cfg.embed_dim,
                actual: self.embed_dim,
            });
        }
        if self.layers != cfg.layers {
            return Err(ShapeError::ShapeMismatch {
                what: "token layers",
                expected: cfg.layers,
                actual: self.layers,
            });
        }
        let expected = self.slices() * self.tokens_per_layer * self.embed_dim;
        if self.values.len() != expected {
            return Err(ShapeError::ShapeMismatch {
                what: "token values",
                expected,
                actual: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
