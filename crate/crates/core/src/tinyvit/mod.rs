//! A desk-scale vision transformer that regresses dense depth.
//!
//! Images are cut into square patches, linearly embedded and summed with
//! learned positional embeddings. Each encoder layer is a pre-norm block
//! (multi-head self-attention and a GELU MLP, both residual). After the last
//! layer a final layer norm feeds a per-patch linear head whose softplus output
//! is bilinearly upsampled to full resolution.
//!
//! Calibration tokens are extra rows appended to the sequence; see
//! [`InjectionMode`] for the three ways they enter the encoder. Tokens never
//! reach the decoder.

pub(crate) mod backward;
mod forward;
mod tokens;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::ShapeError;

pub use backward::{forward_backward_full, forward_backward_tokens, forward_backward_weights, Gradients};
pub use forward::{export_embeddings, forward, forward_with, AttentionRecord, ForwardOptions, ForwardOutput};
pub use tokens::{InjectionMode, TokenInit, TokenSet};
pub use weights::{init_model, Block, LayerNorm, Linear, ModelWeights, NamedTensor};

/// Transformer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            layers: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ShapeError::InvalidConfig("image_size must be a positive multiple of patch_size"));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(ShapeError::InvalidConfig("embed_dim must be divisible by heads"));
        }
        if self.layers == 0 {
            return Err(ShapeError::InvalidConfig("at least one layer is required"));
        }
        if self.mlp_ratio == 0 || self.channels == 0 {
            return Err(ShapeError::InvalidConfig("mlp_ratio and channels must be positive"));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}
