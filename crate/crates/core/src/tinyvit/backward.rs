//! Reverse-mode gradients of a scalar loss through the transformer.
//!
//! The loss enters through its adjoint with respect to every output depth
//! pixel. Weight gradients are only formed when requested, which keeps token
//! training to roughly two forward passes of work.

use alloc::vec;
use alloc::vec::Vec;

use super::forward::{columns, forward_cached, gelu_grad, sigmoid, upsample_taps, BlockCache, Cache, ForwardOptions, LnCache};
use super::tokens::TokenSet;
use super::weights::{Block, LayerNorm, Linear, ModelWeights};
use crate::error::{Error, ShapeError};
use crate::linalg::{column_sums_acc, dot, matmul_at_acc, matmul_bt_acc};
use crate::objective::{loss, LossKind};
use crate::remap::{DepthMap, ImageBuffer};

/// Output of a combined forward/backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub depth: DepthMap,
    pub weights: Option<ModelWeights>,
    pub tokens: Option<Vec<f64>>,
}

/// `dx` for `y = x·W + b`; accumulates `dW`, `db` when `grad` is given.
fn linear_backward(x: &[f64], dy: &[f64], l: &Linear, grad: Option<&mut Linear>) -> Vec<f64> {
    let rows = dy.len() / l.outputs;
    let mut dx = vec![0.0; rows * l.inputs];
    matmul_bt_acc(dy, &l.weight, &mut dx, rows, l.outputs, l.inputs);
    if let Some(g) = grad {
        matmul_at_acc(x, dy, &mut g.weight, l.inputs, rows, l.outputs);
        column_sums_acc(dy, &mut g.bias);
    }
    dx
}

fn layer_norm_backward(dy: &[f64], cache: &LnCache, ln: &LayerNorm, grad: Option<&mut LayerNorm>) -> Vec<f64> {
    let dim = ln.gamma.len();
    let mut dx = vec![0.0; dy.len()];
    let mut grad = grad;
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        if let Some(g) = grad.as_deref_mut() {
            for j in 0..dim {
                g.gamma[j] += dyr[j] * xh[j];
                g.beta[j] += dyr[j];
            }
        }
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for j in 0..dim {
            let d = dyr[j] * ln.gamma[j];
            sum += d;
            sum_xh += d * xh[j];
        }
        let (mean, mean_xh) = (sum / dim as f64, sum_xh / dim as f64);
        for j in 0..dim {
            let d = dyr[j] * ln.gamma[j];
            dx[r * dim + j] = rs * (d - mean - xh[j] * mean_xh);
        }
    }
    dx
}

fn block_backward(block: &Block, cache: &BlockCache, heads: usize, dout: &[f64], grad: Option<&mut Block>) -> Vec<f64> {
    let f = block.ln1.gamma.len();
    let d = f / heads;
    let rows = cache.rows;
    let scale = 1.0 / libm::sqrt(d as f64);
    let (mut g_ln1, mut g_qkv, mut g_proj, mut g_ln2, mut g_fc1, mut g_fc2) = match grad {
        Some(g) => (
            Some(&mut g.ln1),
            Some(&mut g.qkv),
            Some(&mut g.proj),
            Some(&mut g.ln2),
            Some(&mut g.fc1),
            Some(&mut g.fc2),
        ),
        None => (None, None, None, None, None, None),
    };

    // out = x1 + fc2(gelu(fc1(ln2(x1))))
    let d_act = linear_backward(&cache.act, dout, &block.fc2, g_fc2.as_deref_mut());
    let d_pre: Vec<f64> = d_act.iter().zip(&cache.pre).map(|(&g, &p)| g * gelu_grad(p)).collect();
    let d_h2 = linear_backward(&cache.h2, &d_pre, &block.fc1, g_fc1.as_deref_mut());
    let mut d_x1 = layer_norm_backward(&d_h2, &cache.ln2, &block.ln2, g_ln2.as_deref_mut());
    d_x1.iter_mut().zip(dout).for_each(|(a, &b)| *a += b);

    // x1 = x + proj(attention(ln1(x)))
    let d_ctx = linear_backward(&cache.ctx, &d_x1, &block.proj, g_proj.as_deref_mut());
    let mut d_qkv = vec![0.0; rows * 3 * f];
    for h in 0..heads {
        let a = &cache.attn[h];
        let q = columns(&cache.qkv, 3 * f, h * d, d);
        let k = columns(&cache.qkv, 3 * f, f + h * d, d);
        let v = columns(&cache.qkv, 3 * f, 2 * f + h * d, d);
        let dc = columns(&d_ctx, f, h * d, d);

        let mut ds = vec![0.0; rows * rows];
        let mut dv = vec![0.0; rows * d];
        for i in 0..rows {
            let arow = &a[i * rows..(i + 1) * rows];
            let dci = &dc[i * d..(i + 1) * d];
            let dsrow = &mut ds[i * rows..(i + 1) * rows];
            let mut weighted = 0.0;
            for j in 0..rows {
                if arow[j] == 0.0 {
                    continue;
                }
                let da = dot(dci, &v[j * d..(j + 1) * d]);
                dsrow[j] = da;
                weighted += da * arow[j];
                for (o, &g) in dv[j * d..(j + 1) * d].iter_mut().zip(dci) {
                    *o += arow[j] * g;
                }
            }
            for j in 0..rows {
                dsrow[j] = arow[j] * (dsrow[j] - weighted) * scale;
            }
        }
        for i in 0..rows {
            let dsrow = &ds[i * rows..(i + 1) * rows];
            let qi = &q[i * d..(i + 1) * d];
            let (dq_off, dk_off) = (h * d, f + h * d);
            for j in 0..rows {
                let s = dsrow[j];
                if s == 0.0 {
                    continue;
                }
                for t in 0..d {
                    d_qkv[i * 3 * f + dq_off + t] += s * k[j * d + t];
                    d_qkv[j * 3 * f + dk_off + t] += s * qi[t];
                }
            }
            let dv_off = 2 * f + h * d;
            d_qkv[i * 3 * f + dv_off..i * 3 * f + dv_off + d].copy_from_slice(&dv[i * d..(i + 1) * d]);
        }
    }
    let d_h1 = linear_backward(&cache.h1, &d_qkv, &block.qkv, g_qkv.as_deref_mut());
    let mut d_x = layer_norm_backward(&d_h1, &cache.ln1, &block.ln1, g_ln1.as_deref_mut());
    d_x.iter_mut().zip(&d_x1).for_each(|(a, &b)| *a += b);
    d_x
}

fn backward(
    model: &ModelWeights,
    tokens: Option<&TokenSet>,
    cache: &Cache,
    d_depth: &[f64],
    want_weights: bool,
) -> (Option<ModelWeights>, Option<Vec<f64>>) {
    let cfg = &model.config;
    let (f, p, g) = (cfg.embed_dim, cfg.num_patches(), cfg.grid());
    let mut wgrad = want_weights.then(|| model.zeros_like());
    let mut tgrad = tokens.map(|t| vec![0.0; t.values.len()]);

    // Upsampling transpose.
    let taps = upsample_taps(cfg);
    let n = cfg.image_size;
    let mut d_patch = vec![0.0; p];
    for (y, &(y0, y1, wy)) in taps.iter().enumerate() {
        for (x, &(x0, x1, wx)) in taps.iter().enumerate() {
            let gd = d_depth[y * n + x];
            if gd == 0.0 {
                continue;
            }
            d_patch[y0 * g + x0] += (1.0 - wy) * (1.0 - wx) * gd;
            d_patch[y0 * g + x1] += (1.0 - wy) * wx * gd;
            d_patch[y1 * g + x0] += wy * (1.0 - wx) * gd;
            d_patch[y1 * g + x1] += wy * wx * gd;
        }
    }
    let d_logits: Vec<f64> = d_patch.iter().zip(&cache.logits).map(|(&dp, &u)| dp * sigmoid(u)).collect();
    let d_head_in = linear_backward(
        &cache.head_in,
        &d_logits,
        &model.head,
        wgrad.as_mut().map(|w| &mut w.head),
    );
    let d_z = layer_norm_backward(&d_head_in, &cache.lnf, &model.ln_f, wgrad.as_mut().map(|w| &mut w.ln_f));

    // Walk the encoder backwards. `d_seq` is the gradient w.r.t. the output of
    // the current layer; rows dropped after a layer receive zero gradient.
    let mut d_next = d_z;
    for l in (0..cfg.layers).rev() {
        let bc = &cache.blocks[l];
        let mut d_seq = vec![0.0; bc.rows * f];
        let carried = d_next.len().min(d_seq.len());
        d_seq[..carried].copy_from_slice(&d_next[..carried]);
        let d_in = block_backward(
            &model.blocks[l],
            bc,
            cfg.heads,
            &d_seq,
            wgrad.as_mut().map(|w| &mut w.blocks[l]),
        );
        if bc.injected {
            if let (Some(t), Some(tg)) = (tokens, tgrad.as_mut()) {
                let m = t.tokens_per_layer;
                let slice = match t.mode {
                    super::InjectionMode::Layerwise => l,
                    _ => 0,
                };
                let dst = &mut tg[slice * m * f..(slice + 1) * m * f];
                dst.iter_mut().zip(&d_in[p * f..]).for_each(|(a, &b)| *a += b);
            }
            d_next = d_in[..p * f].to_vec();
        } else {
            d_next = d_in;
        }
    }

    if let Some(w) = wgrad.as_mut() {
        column_sums_acc(&d_next, &mut w.patch_embed.bias);
        w.pos_embed.iter_mut().zip(&d_next).for_each(|(a, &b)| *a += b);
        matmul_at_acc(&cache.patches, &d_next, &mut w.patch_embed.weight, cfg.patch_dim(), p, f);
    }
    (wgrad, tgrad)
}

fn check_adjoint(model: &ModelWeights, adjoint: &[f64]) -> Result<(), ShapeError> {
    let n = model.config.image_size * model.config.image_size;
    if adjoint.len() != n {
        return Err(ShapeError::ShapeMismatch {
            what: "depth adjoint",
            expected: n,
            actual: adjoint.len(),
        });
    }
    Ok(())
}

/// Gradient of `Σ_x adjoint(x)·depth(x)` with respect to every token entry,
/// with all model weights held fixed.
pub fn forward_backward_tokens(
    model: &ModelWeights,
    img: &ImageBuffer,
    tokens: &TokenSet,
    adjoint: &[f64],
) -> Result<Vec<f64>, ShapeError> {
    check_adjoint(model, adjoint)?;
    let (_, cache) = forward_cached(model, img, Some(tokens), &ForwardOptions::default())?;
    Ok(backward(model, Some(tokens), &cache, adjoint, false).1.unwrap_or_default())
}

/// Gradient of `Σ_x adjoint(x)·depth(x)` with respect to every model weight
/// on the token-free path.
pub fn forward_backward_weights(model: &ModelWeights, img: &ImageBuffer, adjoint: &[f64]) -> Result<ModelWeights, ShapeError> {
    check_adjoint(model, adjoint)?;
    let (_, cache) = forward_cached(model, img, None, &ForwardOptions::default())?;
    Ok(backward(model, None, &cache, adjoint, true).0.expect("weight gradients requested"))
}

/// Generic pass: runs the forward, lets `adjoint_of` turn the prediction into
/// a depth adjoint, and returns the requested gradients.
pub(crate) fn forward_backward_with(
    model: &ModelWeights,
    img: &ImageBuffer,
    tokens: Option<&TokenSet>,
    want_weights: bool,
    adjoint_of: impl FnOnce(&DepthMap) -> Result<Vec<f64>, Error>,
) -> Result<Gradients, Error> {
    let (out, cache) = forward_cached(model, img, tokens, &ForwardOptions::default())?;
    let adjoint = adjoint_of(&out.depth)?;
    check_adjoint(model, &adjoint)?;
    let (weights, tokens) = backward(model, tokens, &cache, &adjoint, want_weights);
    Ok(Gradients {
        depth: out.depth,
        weights,
        tokens,
    })
}

/// Loss and gradient with respect to all model weights for a supervised
/// objective against `target` (no tokens).
pub fn forward_backward_full(
    model: &ModelWeights,
    img: &ImageBuffer,
    target: &DepthMap,
    objective: LossKind,
) -> Result<(f64, ModelWeights), Error> {
    let mut value = 0.0;
    let grads = forward_backward_with(model, img, None, true, |pred| {
        let l = loss(objective, pred, target)?;
        value = l.value;
        Ok(l.adjoint)
    })?;
    Ok((value, grads.weights.expect("weight gradients requested")))
}
