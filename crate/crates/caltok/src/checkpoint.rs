//! `CTOK` checkpoints.
//!
//! Layout: the magic `CTOK`, a `u16` format version, a `u32` manifest length,
//! the JSON manifest, then every tensor as little-endian `f32` in manifest
//! order. All integers are little-endian.

use std::path::Path;

use caltok_core::tinyvit::{InjectionMode, ModelConfig, ModelWeights, TokenSet};
use serde::{Deserialize, Serialize};

use crate::error::{CaltokError, Result};
use crate::netpbm::{read_bytes, write_bytes};

pub const MAGIC: &[u8; 4] = b"CTOK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<InjectionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_per_layer: Option<usize>,
    pub tensors: Vec<TensorInfo>,
}

fn encode(manifest: &Manifest, tensors: &[&[f64]]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(10 + json.len() + 4 * tensors.iter().map(|t| t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for &v in *t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8]) -> std::result::Result<(Manifest, Vec<Vec<f64>>), String> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err("not a CTOK checkpoint".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let json = bytes.get(10..10 + len).ok_or("truncated manifest")?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| format!("manifest: {e}"))?;
    let mut pos = 10 + len;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for info in &manifest.tensors {
        let n: usize = info.shape.iter().product();
        let data = bytes.get(pos..pos + 4 * n).ok_or_else(|| format!("truncated tensor {}", info.name))?;
        tensors.push(
            data.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect(),
        );
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    Ok((manifest, tensors))
}

pub fn encode_model(model: &ModelWeights) -> Vec<u8> {
    let views = model.tensors();
    let manifest = Manifest {
        kind: CheckpointKind::Model,
        config: model.config,
        mode: None,
        tokens_per_layer: None,
        tensors: views
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let data: Vec<&[f64]> = views.iter().map(|t| t.data).collect();
    encode(&manifest, &data)
}

pub fn decode_model(bytes: &[u8]) -> std::result::Result<ModelWeights, String> {
    let (manifest, tensors) = decode(bytes)?;
    if manifest.kind != CheckpointKind::Model {
        return Err("checkpoint holds tokens, not a model".into());
    }
    let model = ModelWeights::from_tensors(manifest.config, &tensors).map_err(|e| e.to_string())?;
    let expected: Vec<(String, Vec<usize>)> = model.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    let stored: Vec<(String, Vec<usize>)> = manifest.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
    if expected != stored {
        return Err("tensor names or shapes do not match the configuration".into());
    }
    Ok(model)
}

/// Tokens are stored as one `[slices, M, F]` tensor next to the model
/// configuration they were trained for.
pub fn encode_tokens(tokens: &TokenSet, config: &ModelConfig) -> Vec<u8> {
    let manifest = Manifest {
        kind: CheckpointKind::Tokens,
        config: *config,
        mode: Some(tokens.mode),
        tokens_per_layer: Some(tokens.tokens_per_layer),
        tensors: vec![TensorInfo {
            name: "tokens".into(),
            shape: vec![tokens.slices(), tokens.tokens_per_layer, tokens.embed_dim],
        }],
    };
    encode(&manifest, &[&tokens.values])
}

pub fn decode_tokens(bytes: &[u8]) -> std::result::Result<(TokenSet, ModelConfig), String> {
    let (manifest, mut tensors) = decode(bytes)?;
    let (CheckpointKind::Tokens, Some(mode), Some(m)) = (manifest.kind, manifest.mode, manifest.tokens_per_layer) else {
        return Err("checkpoint does not hold tokens".into());
    };
    let cfg = manifest.config;
    cfg.validate().map_err(|e| e.to_string())?;
    let expected = vec![mode.slices(cfg.layers), m, cfg.embed_dim];
    if tensors.len() != 1 || manifest.tensors[0].shape != expected {
        return Err("token tensor shape does not match the configuration".into());
    }
    let tokens = TokenSet {
        mode,
        tokens_per_layer: m,
        embed_dim: cfg.embed_dim,
        layers: cfg.layers,
        values: tensors.pop().unwrap_or_default(),
    };
    Ok((tokens, cfg))
}

pub fn save_model(path: &Path, model: &ModelWeights) -> Result<()> {
    write_bytes(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    decode_model(&read_bytes(path)?).map_err(|m| CaltokError::format(path, m))
}

pub fn save_tokens(path: &Path, tokens: &TokenSet, config: &ModelConfig) -> Result<()> {
    write_bytes(path, &encode_tokens(tokens, config))
}

pub fn load_tokens(path: &Path) -> Result<(TokenSet, ModelConfig)> {
    decode_tokens(&read_bytes(path)?).map_err(|m| CaltokError::format(path, m))
}
