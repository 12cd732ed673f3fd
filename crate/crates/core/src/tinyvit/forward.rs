use alloc::vec;
use alloc::vec::Vec;

use super::tokens::{InjectionMode, TokenSet};
use super::weights::{Block, LayerNorm, Linear, ModelWeights};
use super::ModelConfig;
use crate::error::ShapeError;
use crate::linalg::{add_row_bias, dot, matmul_acc};
use crate::remap::{DepthMap, ImageBuffer};

pub(crate) const LN_EPS: f64 = 1e-5;
const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Collect per-layer attention summaries.
    pub record_attention: bool,
    /// Per-token visibility as attention keys (`false` = logit forced to −∞).
    /// Length must equal the number of tokens per set.
    pub token_key_mask: Option<&'a [bool]>,
}

/// Attention summary of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    /// Mean attention weight that token queries put on each patch, averaged
    /// over heads and tokens. Empty when the layer has no tokens.
    pub token_to_patch: Vec<f64>,
    /// Total attention mass each patch query puts on the tokens, averaged over
    /// heads. Empty when the layer has no tokens.
    pub patch_to_token: Vec<f64>,
    /// Largest `|Σ_j A_ij − 1|` over all rows and heads.
    pub max_row_sum_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub grid: usize,
    pub layers: Vec<LayerAttention>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub depth: DepthMap,
    /// Final-layer patch embeddings `z^(L)` (tokens removed), `P × F`.
    pub embeddings: Vec<f64>,
    pub attention: Option<AttentionRecord>,
}

pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) struct BlockCache {
    pub rows: usize,
    pub injected: bool,
    pub ln1: LnCache,
    pub h1: Vec<f64>,
    pub qkv: Vec<f64>,
    pub attn: Vec<Vec<f64>>,
    pub ctx: Vec<f64>,
    pub ln2: LnCache,
    pub h2: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
}

pub(crate) struct Cache {
    pub patches: Vec<f64>,
    pub blocks: Vec<BlockCache>,
    pub lnf: LnCache,
    pub head_in: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], dim: usize, ln: &LayerNorm) -> (Vec<f64>, LnCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / libm::sqrt(var + LN_EPS);
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * ln.gamma[j] + ln.beta[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub(crate) fn linear(x: &[f64], l: &Linear) -> Vec<f64> {
    let rows = x.len() / l.inputs;
    let mut out = vec![0.0; rows * l.outputs];
    matmul_acc(x, &l.weight, &mut out, rows, l.inputs, l.outputs);
    add_row_bias(&mut out, &l.bias);
    out
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

#[inline]
pub(crate) fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        libm::log1p(libm::exp(u))
    }
}

#[inline]
pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + libm::exp(-u))
    } else {
        let e = libm::exp(u);
        e / (1.0 + e)
    }
}

/// Columns `[offset, offset+width)` of a row-major `rows × stride` matrix.
pub(crate) fn columns(x: &[f64], stride: usize, offset: usize, width: usize) -> Vec<f64> {
    x.chunks_exact(stride)
        .flat_map(|row| row[offset..offset + width].iter().copied())
        .collect()
}

fn block_forward(
    block: &Block,
    cfg: &ModelConfig,
    x: &[f64],
    rows: usize,
    key_visible: Option<&[bool]>,
) -> (Vec<f64>, BlockCache) {
    let f = cfg.embed_dim;
    let d = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(d as f64);

    let (h1, ln1) = layer_norm(x, f, &block.ln1);
    let qkv = linear(&h1, &block.qkv);
    let mut ctx = vec![0.0; rows * f];
    let mut attn = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = columns(&qkv, 3 * f, h * d, d);
        let k = columns(&qkv, 3 * f, f + h * d, d);
        let v = columns(&qkv, 3 * f, 2 * f + h * d, d);
        let mut a = vec![0.0; rows * rows];
        for i in 0..rows {
            let qi = &q[i * d..(i + 1) * d];
            let row = &mut a[i * rows..(i + 1) * rows];
            let mut max = f64::NEG_INFINITY;
            for j in 0..rows {
                if key_visible.map_or(true, |m| m[j]) {
                    let s = dot(qi, &k[j * d..(j + 1) * d]) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
            }
            let mut sum = 0.0;
            for j in 0..rows {
                if key_visible.map_or(true, |m| m[j]) {
                    let e = libm::exp(row[j] - max);
                    row[j] = e;
                    sum += e;
                } else {
                    row[j] = 0.0;
                }
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
            // ctx_h[i] = Σ_j A_ij v_j
            let out = &mut ctx[i * f + h * d..i * f + (h + 1) * d];
            for (j, &aij) in row.iter().enumerate() {
                if aij == 0.0 {
                    continue;
                }
                for (o, &vv) in out.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *o += aij * vv;
                }
            }
        }
        attn.push(a);
    }
    let mut x1 = linear(&ctx, &block.proj);
    x1.iter_mut().zip(x).for_each(|(o, &r)| *o += r);

    let (h2, ln2) = layer_norm(&x1, f, &block.ln2);
    let pre = linear(&h2, &block.fc1);
    let act: Vec<f64> = pre.iter().map(|&p| gelu(p)).collect();
    let mut out = linear(&act, &block.fc2);
    out.iter_mut().zip(&x1).for_each(|(o, &r)| *o += r);

    let cache = BlockCache {
        rows,
        injected: false,
        ln1,
        h1,
        qkv,
        attn,
        ctx,
        ln2,
        h2,
        pre,
        act,
    };
    (out, cache)
}

/// Splits the image into `P × (ps·ps·C)` patch vectors, row-major over patches,
/// each patch flattened as `(dy, dx, c)`.
pub(crate) fn patchify(cfg: &ModelConfig, img: &ImageBuffer) -> Result<Vec<f64>, ShapeError> {
    if img.width != cfg.image_size || img.height != cfg.image_size {
        return Err(ShapeError::DimensionMismatch {
            expected: (cfg.image_size, cfg.image_size),
            actual: (img.width, img.height),
        });
    }
    if img.channels != cfg.channels {
        return Err(ShapeError::ShapeMismatch {
            what: "image channels",
            expected: cfg.channels,
            actual: img.channels,
        });
    }
    let (ps, g) = (cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for dy in 0..ps {
                for dx in 0..ps {
                    out.extend(img.pixel(gx * ps + dx, gy * ps + dy).iter().map(|&v| v as f64));
                }
            }
        }
    }
    Ok(out)
}

/// Per-axis bilinear upsampling taps from patch centers to pixels: for each
/// pixel, `(g0, g1, w)` with value `(1-w)·s[g0] + w·s[g1]`.
pub(crate) fn upsample_taps(cfg: &ModelConfig) -> Vec<(usize, usize, f64)> {
    let (ps, g) = (cfg.patch_size as f64, cfg.grid());
    (0..cfg.image_size)
        .map(|x| {
            let pos = ((x as f64 + 0.5) / ps - 0.5).clamp(0.0, (g - 1) as f64);
            let g0 = libm::floor(pos) as usize;
            let g1 = (g0 + 1).min(g - 1);
            (g0, g1, pos - g0 as f64)
        })
        .collect()
}

pub(crate) fn upsample(cfg: &ModelConfig, patch_depth: &[f64]) -> Vec<f64> {
    let taps = upsample_taps(cfg);
    let g = cfg.grid();
    let n = cfg.image_size;
    let mut out = vec![0.0; n * n];
    for (y, &(y0, y1, wy)) in taps.iter().enumerate() {
        for (x, &(x0, x1, wx)) in taps.iter().enumerate() {
            let top = (1.0 - wx) * patch_depth[y0 * g + x0] + wx * patch_depth[y0 * g + x1];
            let bottom = (1.0 - wx) * patch_depth[y1 * g + x0] + wx * patch_depth[y1 * g + x1];
            out[y * n + x] = (1.0 - wy) * top + wy * bottom;
        }
    }
    out
}

pub(crate) fn check_inputs(model: &ModelWeights, tokens: Option<&TokenSet>, opts: &ForwardOptions<'_>) -> Result<(), ShapeError> {
    model.config.validate()?;
    if let Some(t) = tokens {
        t.check(&model.config)?;
        if let Some(mask) = opts.token_key_mask {
            if mask.len() != t.tokens_per_layer {
                return Err(ShapeError::ShapeMismatch {
                    what: "token key mask",
                    expected: t.tokens_per_layer,
                    actual: mask.len(),
                });
            }
        }
    }
    Ok(())
}

pub(crate) fn forward_cached(
    model: &ModelWeights,
    img: &ImageBuffer,
    tokens: Option<&TokenSet>,
    opts: &ForwardOptions<'_>,
) -> Result<(ForwardOutput, Cache), ShapeError> {
    check_inputs(model, tokens, opts)?;
    let cfg = &model.config;
    let (f, p) = (cfg.embed_dim, cfg.num_patches());

    let patches = patchify(cfg, img)?;
    let mut seq = linear(&patches, &model.patch_embed);
    seq.iter_mut().zip(&model.pos_embed).for_each(|(s, &e)| *s += e);
    let mut rows = p;

    let mut blocks = Vec::with_capacity(cfg.layers);
    let mut layers = Vec::new();
    for (l, block) in model.blocks.iter().enumerate() {
        let mut injected = false;
        if let Some(t) = tokens {
            if t.mode != InjectionMode::Single || l == 0 {
                seq.truncate(p * f);
                seq.extend_from_slice(t.slice_for_layer(l));
                rows = p + t.tokens_per_layer;
                injected = true;
            }
        }
        let visible: Option<Vec<bool>> = match (tokens, opts.token_key_mask) {
            (Some(_), Some(mask)) => Some((0..rows).map(|j| j < p || mask[j - p]).collect()),
            _ => None,
        };
        let (out, mut cache) = block_forward(block, cfg, &seq, rows, visible.as_deref());
        cache.injected = injected;
        if opts.record_attention {
            layers.push(summarize_attention(&cache.attn, rows, p, cfg.heads));
        }
        blocks.push(cache);
        seq = out;
    }
    seq.truncate(p * f);

    let (head_in, lnf) = layer_norm(&seq, f, &model.ln_f);
    let logits = linear(&head_in, &model.head);
    let patch_depth: Vec<f64> = logits.iter().map(|&u| softplus(u)).collect();
    let depth = DepthMap::new(cfg.image_size, cfg.image_size, upsample(cfg, &patch_depth));

    let output = ForwardOutput {
        depth,
        embeddings: seq,
        attention: opts.record_attention.then(|| AttentionRecord {
            grid: cfg.grid(),
            layers,
        }),
    };
    let cache = Cache {
        patches,
        blocks,
        lnf,
        head_in,
        logits,
    };
    Ok((output, cache))
}

fn summarize_attention(attn: &[Vec<f64>], rows: usize, patches: usize, heads: usize) -> LayerAttention {
    let m = rows - patches;
    let mut token_to_patch = vec![0.0; if m > 0 { patches } else { 0 }];
    let mut patch_to_token = vec![0.0; if m > 0 { patches } else { 0 }];
    let mut max_row_sum_error: f64 = 0.0;
    for a in attn {
        for i in 0..rows {
            let row = &a[i * rows..(i + 1) * rows];
            max_row_sum_error = max_row_sum_error.max(libm::fabs(row.iter().sum::<f64>() - 1.0));
            if m == 0 {
                continue;
            }
            if i >= patches {
                for (t, &v) in token_to_patch.iter_mut().zip(&row[..patches]) {
                    *t += v / (heads * m) as f64;
                }
            } else {
                patch_to_token[i] += row[patches..].iter().sum::<f64>() / heads as f64;
            }
        }
    }
    LayerAttention {
        token_to_patch,
        patch_to_token,
        max_row_sum_error,
    }
}

/// Predicts depth for `img`. With `tokens = None` this is the unmodified
/// perspective model.
pub fn forward(model: &ModelWeights, img: &ImageBuffer, tokens: Option<&TokenSet>) -> Result<DepthMap, ShapeError> {
    Ok(forward_cached(model, img, tokens, &ForwardOptions::default())?.0.depth)
}

pub fn forward_with(
    model: &ModelWeights,
    img: &ImageBuffer,
    tokens: Option<&TokenSet>,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardOutput, ShapeError> {
    Ok(forward_cached(model, img, tokens, opts)?.0)
}

/// Final-layer patch embeddings, one row of `F` values per patch.
pub fn export_embeddings(model: &ModelWeights, img: &ImageBuffer, tokens: Option<&TokenSet>) -> Result<Vec<Vec<f64>>, ShapeError> {
    let out = forward_with(model, img, tokens, &ForwardOptions::default())?;
    Ok(out
        .embeddings
        .chunks_exact(model.config.embed_dim)
        .map(|r| r.to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyvit::{init_model, TokenInit};

    pub(crate) fn test_image(cfg: &ModelConfig, seed: u32) -> ImageBuffer {
        ImageBuffer::from_fn(cfg.image_size, cfg.image_size, cfg.channels, |x, y, c| {
            let v = libm::sin((x as f64 * 0.37 + y as f64 * 0.21 + c as f64 + seed as f64) * 1.3);
            (0.5 + 0.5 * v) as f32
        })
    }

    #[test]
    fn depth_is_positive_and_image_sized() {
        let cfg = ModelConfig::default();
        let model = init_model(&cfg, 0).unwrap();
        let img = test_image(&cfg, 0);
        for tokens in [
            None,
            Some(TokenSet::new(&cfg, InjectionMode::Layerwise, 8, TokenInit::TruncatedNormal { seed: 1 })),
            Some(TokenSet::new(&cfg, InjectionMode::Single, 3, TokenInit::TruncatedNormal { seed: 1 })),
            Some(TokenSet::new(&cfg, InjectionMode::Shared, 16, TokenInit::TruncatedNormal { seed: 1 })),
        ] {
            let d = forward(&model, &img, tokens.as_ref()).unwrap();
            assert_eq!(d.dims(), (64, 64));
            assert!(d.depth.iter().all(|&v| v > 0.0));
            assert_eq!(d.valid_count(), 64 * 64);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::default();
        let model = init_model(&cfg, 5).unwrap();
        let tokens = TokenSet::new(&cfg, InjectionMode::Layerwise, 8, TokenInit::TruncatedNormal { seed: 2 });
        let img = test_image(&cfg, 3);
        let a = forward(&model, &img, Some(&tokens)).unwrap();
        let b = forward(&model, &img, Some(&tokens)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_are_normalized() {
        let cfg = ModelConfig::default();
        let model = init_model(&cfg, 0).unwrap();
        let img = test_image(&cfg, 1);
        for mode in [InjectionMode::Layerwise, InjectionMode::Single, InjectionMode::Shared] {
            let tokens = TokenSet::new(&cfg, mode, 8, TokenInit::TruncatedNormal { seed: 9 });
            let out = forward_with(
                &model,
                &img,
                Some(&tokens),
                &ForwardOptions {
                    record_attention: true,
                    token_key_mask: None,
                },
            )
            .unwrap();
            let rec = out.attention.unwrap();
            assert_eq!(rec.layers.len(), cfg.layers);
            for layer in &rec.layers {
                assert!(layer.max_row_sum_error < 1e-5);
                assert_eq!(layer.token_to_patch.len(), cfg.num_patches());
                // Mean over token queries of a probability row restricted to
                // patches cannot exceed one in total.
                assert!(layer.token_to_patch.iter().sum::<f64>() <= 1.0 + 1e-12);
                assert!(layer.patch_to_token.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn masked_extra_tokens_change_nothing() {
        let cfg = ModelConfig::default();
        let model = init_model(&cfg, 0).unwrap();
        let img = test_image(&cfg, 2);
        for mode in [InjectionMode::Layerwise, InjectionMode::Single, InjectionMode::Shared] {
            let base = TokenSet::new(&cfg, mode, 8, TokenInit::TruncatedNormal { seed: 3 });
            let mut doubled = TokenSet::new(&cfg, mode, 16, TokenInit::Zeros);
            for s in 0..base.slices() {
                let n = 8 * cfg.embed_dim;
                doubled.values[s * 2 * n..s * 2 * n + n].copy_from_slice(&base.values[s * n..(s + 1) * n]);
            }
            let mask: Vec<bool> = (0..16).map(|i| i < 8).collect();
            let a = forward_with(&model, &img, Some(&base), &ForwardOptions::default()).unwrap();
            let b = forward_with(
                &model,
                &img,
                Some(&doubled),
                &ForwardOptions {
                    record_attention: false,
                    token_key_mask: Some(&mask),
                },
            )
            .unwrap();
            assert_eq!(a.embeddings, b.embeddings, "{mode:?}");
            assert_eq!(a.depth, b.depth);
        }
    }

    #[test]
    fn output_shape_ignores_token_count() {
        let cfg = ModelConfig::default();
        let model = init_model(&cfg, 0).unwrap();
        let img = test_image(&cfg, 0);
        for m in [1, 8, 32] {
            let tokens = TokenSet::new(&cfg, InjectionMode::Layerwise, m, TokenInit::TruncatedNormal { seed: 0 });
            let out = forward_with(&model, &img, Some(&tokens), &ForwardOptions::default()).unwrap();
            assert_eq!(out.depth.dims(), (64, 64));
            assert_eq!(out.embeddings.len(), cfg.num_patches() * cfg.embed_dim);
        }
    }

    #[test]
    fn embeddings_have_one_row_per_patch() {
        let cfg = ModelConfig::default();
        let model = init_model(&cfg, 0).unwrap();
        let img = test_image(&cfg, 0);
        let rows = export_embeddings(&model, &img, None).unwrap();
        assert_eq!(rows.len(), (64 / 8) * (64 / 8));
        assert!(rows.iter().all(|r| r.len() == cfg.embed_dim));
        assert_eq!(rows, export_embeddings(&model, &img, None).unwrap());
    }

    #[test]
    fn shape_errors() {
        let cfg = ModelConfig::default();
        let model = init_model(&cfg, 0).unwrap();
        assert!(forward(&model, &ImageBuffer::new(32, 32, 3), None).is_err());
        assert!(forward(&model, &ImageBuffer::new(64, 64, 1), None).is_err());
        let other = ModelConfig {
            embed_dim: 32,
            ..cfg
        };
        let tokens = TokenSet::new(&other, InjectionMode::Layerwise, 8, TokenInit::Zeros);
        assert!(forward(&model, &test_image(&cfg, 0), Some(&tokens)).is_err());
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let cfg = ModelConfig::default();
        let up = upsample(&cfg, &vec![2.5; cfg.num_patches()]);
        assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    mod props {
        use super::*;
        use crate::tinyvit::InjectionMode;
        use proptest::prelude::*;

        fn tiny() -> ModelConfig {
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

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn depth_is_positive_and_deterministic(model_seed in 0u64..1000, token_seed in 0u64..1000, img_seed in 0u32..1000, scale in 0.1f64..20.0) {
                let cfg = tiny();
                let mut model = init_model(&cfg, model_seed).unwrap();
                model.params_mut().into_iter().for_each(|t| t.iter_mut().for_each(|w| *w *= scale));
                let img = test_image(&cfg, img_seed);
                for mode in [InjectionMode::Layerwise, InjectionMode::Single, InjectionMode::Shared] {
                    let tokens = TokenSet::new(&cfg, mode, 2, TokenInit::TruncatedNormal { seed: token_seed });
                    let a = forward(&model, &img, Some(&tokens)).unwrap();
                    prop_assert!(a.depth.iter().all(|&d| d > 0.0 && d.is_finite()));
                    prop_assert_eq!(&a, &forward(&model, &img, Some(&tokens)).unwrap());
                }
            }
        }
    }
}
