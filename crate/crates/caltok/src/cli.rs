//! The `caltok` command-line tool.
//!
//! Standard output carries only `key=value` lines; progress and notes go to
//! standard error. Exit codes: 0 success, 2 configuration or parse error,
//! 3 I/O error, 4 numeric-domain error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use caltok_core::datagen::Scene;
use caltok_core::geometry::{FisheyeCalibration, FisheyeLens, PinholeIntrinsics};
use caltok_core::metrics::{
    delta1, heldout_seeds, joint_count, predict_scene, rmse, summarize, EvalMode, EvalReport, ImageEval, HELDOUT_SEED_BASE,
};
use caltok_core::objective::{pretrain_fmde, train_tokens_with, LossFrame};
use caltok_core::remap::{apply_warp, apply_warp_depth, build_warp_field_with, coverage_loss, Interpolation, WarpDirection};
use caltok_core::tinyvit::{export_embeddings, forward_with, ForwardOptions, ModelConfig, ModelWeights, TokenSet};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{encode_model, load_model, load_tokens, save_model, save_tokens};
use crate::config::TrainingConfig;
use crate::dataset::{generate_split, load_manifest, load_split, DatasetSpec, Manifest};
use crate::error::{CaltokError, Result};
use crate::json::{read_json, write_json};
use crate::netpbm::{mask_image, normalized_image, read_ppm, write_pgm, write_ppm, GrayImage};
use crate::pfm::{read_depth, write_depth};
use crate::report::{write_loss_log, write_report};

#[derive(Debug, Parser)]
#[command(name = "caltok", version, about = "Fisheye adaptation of a toy depth transformer with calibration tokens")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalKind {
    Perspective,
    Fisheye,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameArg {
    Perspective,
    Fisheye,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warp a perspective image (and optionally its depth) into a fisheye frame.
    Distort {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pin: PathBuf,
        #[arg(long)]
        fe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Warp a fisheye image (and optionally its depth) back to the perspective frame.
    Undistort {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        fe: PathBuf,
        #[arg(long)]
        pin: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Supervised pretraining of the depth model on perspective scenes.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train calibration tokens against a frozen model.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// First held-out distortion seed.
        #[arg(long, default_value_t = HELDOUT_SEED_BASE)]
        seed: u64,
        /// Scoring frame for fisheye evaluation.
        #[arg(long, value_enum, default_value = "perspective")]
        frame: FrameArg,
    },
    /// Write token-to-patch attention maps, one PGM per layer.
    ExportAttn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write final-layer patch embeddings as CSV, one row per patch.
    ExportEmbed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command and returns its `key=value` output lines.
pub fn execute(command: Command) -> Result<Vec<String>> {
    match command {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Distort {
            image,
            pin,
            fe,
            out,
            depth,
        } => warp(WarpDirection::ToFisheye, &image, &pin, &fe, &out, depth.as_deref()),
        Command::Undistort {
            image,
            fe,
            pin,
            out,
            depth,
        } => warp(WarpDirection::ToPerspective, &image, &pin, &fe, &out, depth.as_deref()),
        Command::Pretrain { data, config, out } => pretrain(data.as_deref(), &config, &out),
        Command::Adapt { model, data, config, out } => adapt(&model, data.as_deref(), &config, &out),
        Command::Eval {
            model,
            tokens,
            data,
            mode,
            out,
            split,
            seed,
            frame,
        } => eval(&model, tokens.as_deref(), &data, mode, &out, &split, seed, frame),
        Command::ExportAttn { model, tokens, image, out } => export_attention(&model, &tokens, &image, &out),
        Command::ExportEmbed { model, tokens, image, out } => export_embed(&model, tokens.as_deref(), &image, &out),
    }
}

/// Reads a configuration document; any failure is a configuration error.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path).map_err(|e| CaltokError::Config(e.to_string()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CaltokError::io(path, e))
}

fn kv(key: &str, value: impl std::fmt::Display) -> String {
    format!("{key}={value}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn synth(spec_path: &Path, out: &Path) -> Result<Vec<String>> {
    let spec: DatasetSpec = read_config(spec_path)?;
    spec.validate()?;
    create_dir(out)?;
    let manifest = generate_split(&spec, out)?;
    eprintln!("rendered {} scenes into {}", manifest.files.len(), out.display());
    let mut lines = vec![kv("manifest", out.join(crate::dataset::MANIFEST).display()), kv("scenes", manifest.files.len())];
    for s in &manifest.splits {
        lines.push(kv(&format!("{}_range", s.name), format!("{}..{}", s.start, s.start + s.count as u64)));
    }
    Ok(lines)
}

fn warp(
    direction: WarpDirection,
    image_path: &Path,
    pin_path: &Path,
    fe_path: &Path,
    out: &Path,
    depth_path: Option<&Path>,
) -> Result<Vec<String>> {
    let pin: PinholeIntrinsics = read_config(pin_path)?;
    let fe: FisheyeCalibration = read_config(fe_path)?;
    if !pin.is_valid() {
        return Err(CaltokError::Config("invalid pinhole intrinsics".into()));
    }
    let lens = FisheyeLens::new(fe)?;
    let image = read_ppm(image_path)?;
    let field = build_warp_field_with(direction, &pin, &lens);
    let (warped, mask) = apply_warp(&image, &field, Interpolation::Bilinear)?;
    write_ppm(out, &warped)?;
    let mask_path = out.with_extension("mask.pgm");
    write_pgm(&mask_path, &mask_image(field.out_width, field.out_height, &mask))?;
    let mut lines = vec![
        kv("coverage_loss", coverage_loss(&field)),
        kv("image", out.display()),
        kv("mask", mask_path.display()),
    ];
    if let Some(depth_path) = depth_path {
        let depth = read_depth(depth_path)?;
        let warped_depth = apply_warp_depth(&depth, &field)?;
        let depth_out = out.with_extension("depth.pfm");
        write_depth(&depth_out, &warped_depth)?;
        lines.push(kv("depth", depth_out.display()));
    }
    Ok(lines)
}

fn dataset_root<'a>(data: Option<&'a Path>, cfg: &'a TrainingConfig) -> Result<&'a Path> {
    data.or(cfg.dataset.as_deref())
        .ok_or_else(|| CaltokError::Config("no dataset given (--data or \"dataset\" in the config)".into()))
}

fn load_dataset(root: &Path, config: &ModelConfig, split: &str) -> Result<(Manifest, Vec<Scene>)> {
    let manifest = load_manifest(root)?;
    if manifest.spec.image_size != config.image_size {
        return Err(CaltokError::Config(format!(
            "dataset image size {} differs from model image size {}",
            manifest.spec.image_size, config.image_size
        )));
    }
    let scenes = load_split(root, &manifest, split)?;
    Ok((manifest, scenes))
}

fn evaluate_scenes(
    model: &ModelWeights,
    tokens: Option<&TokenSet>,
    scenes: &[Scene],
    pinhole: &PinholeIntrinsics,
    mode: &EvalMode,
    mut on_image: impl FnMut(usize, &caltok_core::metrics::ScenePrediction) -> Result<()>,
) -> Result<EvalReport> {
    let mut per_image = Vec::with_capacity(scenes.len());
    for (index, scene) in scenes.iter().enumerate() {
        let sp = predict_scene(model, tokens, scene, index, pinhole, mode)?;
        on_image(index, &sp)?;
        per_image.push(ImageEval {
            index,
            rmse: rmse(&sp.pred, &sp.gt)?,
            delta1: delta1(&sp.pred, &sp.gt)?,
            n_pixels: joint_count(&sp.pred, &sp.gt),
        });
    }
    Ok(summarize(per_image))
}

fn pretrain(data: Option<&Path>, config_path: &Path, out: &Path) -> Result<Vec<String>> {
    let cfg: TrainingConfig = read_config(config_path)?;
    cfg.validate()?;
    let root = dataset_root(data, &cfg)?;
    let (manifest, train) = load_dataset(root, &cfg.model, "train")?;
    eprintln!("pretraining on {} scenes for {} steps", train.len(), cfg.iterations);
    let (model, losses) = pretrain_fmde(&train, &cfg.pretrain())?;
    save_model(out, &model)?;
    let rows: Vec<_> = losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| caltok_core::objective::TrainLogRow {
            step,
            loss,
            rmse_eval: None,
        })
        .collect();
    let log = out.with_extension("csv");
    write_loss_log(&log, &rows)?;
    let val = load_split(root, &manifest, "val")?;
    let report = evaluate_scenes(&model, None, &val, &manifest.pinhole, &EvalMode::Perspective, |_, _| Ok(()))?;
    let val_path = out.with_extension("val.json");
    write_report(&val_path, &report)?;
    let mut lines = vec![kv("model", out.display()), kv("log", log.display())];
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        lines.push(kv("initial_loss", first));
        lines.push(kv("final_loss", last));
    }
    lines.extend([
        kv("val_rmse", report.rmse),
        kv("val_delta1", report.delta1),
        kv("parameters", model.parameter_count()),
        kv("model_sha256", sha256_hex(&encode_model(&model))),
    ]);
    Ok(lines)
}

fn adapt(model_path: &Path, data: Option<&Path>, config_path: &Path, out: &Path) -> Result<Vec<String>> {
    let mut cfg: TrainingConfig = read_config(config_path)?;
    let model = load_model(model_path)?;
    // The backbone fixes the architecture; the config's model block is ignored.
    cfg.model = model.config;
    cfg.validate()?;
    let root = dataset_root(data, &cfg)?;
    let (manifest, train) = load_dataset(root, &model.config, "train")?;
    let val = if cfg.eval_every > 0 {
        load_split(root, &manifest, "val")?
    } else {
        Vec::new()
    };
    let mode = EvalMode::Fisheye {
        seeds: heldout_seeds(HELDOUT_SEED_BASE, val.len()),
        frame: LossFrame::Perspective,
    };
    let every = cfg.eval_every;
    let adapt_cfg = cfg.adapt(manifest.pinhole);
    eprintln!("training {:?} tokens on {} scenes for {} steps", adapt_cfg.mode, train.len(), cfg.iterations);
    let mut eval_error = None;
    let (tokens, log) = train_tokens_with(&model, &train, &adapt_cfg, |step, tokens| {
        if every == 0 || (step + 1) % every != 0 || eval_error.is_some() {
            return None;
        }
        match evaluate_scenes(&model, Some(tokens), &val, &manifest.pinhole, &mode, |_, _| Ok(())) {
            Ok(r) => Some(r.rmse),
            Err(e) => {
                eval_error = Some(e);
                None
            }
        }
    })?;
    if let Some(e) = eval_error {
        return Err(e);
    }
    save_tokens(out, &tokens, &model.config)?;
    let log_path = out.with_extension("csv");
    write_loss_log(&log_path, &log)?;
    let mut lines = vec![
        kv("tokens", out.display()),
        kv("log", log_path.display()),
        kv("token_parameters", tokens.parameter_count()),
        kv("backbone_parameters", model.parameter_count()),
        kv("model_sha256", sha256_hex(&encode_model(&model))),
    ];
    if let Some(last) = log.last() {
        lines.push(kv("final_loss", last.loss));
    }
    Ok(lines)
}

fn load_matching_tokens(path: &Path, model: &ModelWeights) -> Result<TokenSet> {
    let (tokens, cfg) = load_tokens(path)?;
    if cfg != model.config {
        return Err(CaltokError::Config("tokens were trained for a different model configuration".into()));
    }
    Ok(tokens)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    model_path: &Path,
    tokens_path: Option<&Path>,
    data: &Path,
    kind: EvalKind,
    out: &Path,
    split: &str,
    seed: u64,
    frame: FrameArg,
) -> Result<Vec<String>> {
    let model = load_model(model_path)?;
    let tokens = match (kind, tokens_path) {
        (EvalKind::Perspective, Some(_)) => {
            eprintln!("perspective evaluation runs the backbone alone; --tokens is ignored");
            None
        }
        (EvalKind::Fisheye, Some(p)) => Some(load_matching_tokens(p, &model)?),
        (_, None) => None,
    };
    let (manifest, scenes) = load_dataset(data, &model.config, split)?;
    let mode = match kind {
        EvalKind::Perspective => EvalMode::Perspective,
        EvalKind::Fisheye => EvalMode::Fisheye {
            seeds: heldout_seeds(seed, scenes.len()),
            frame: match frame {
                FrameArg::Perspective => LossFrame::Perspective,
                FrameArg::Fisheye => LossFrame::Fisheye,
            },
        },
    };
    let maps = out.with_extension("errors");
    create_dir(&maps)?;
    let report = evaluate_scenes(&model, tokens.as_ref(), &scenes, &manifest.pinhole, &mode, |index, sp| {
        let joint: Vec<bool> = sp.pred.mask.iter().zip(&sp.gt.mask).map(|(a, b)| *a && *b).collect();
        let error: Vec<f64> = sp.pred.depth.iter().zip(&sp.gt.depth).map(|(p, g)| (p - g).abs()).collect();
        let (img, _) = normalized_image(sp.pred.width, sp.pred.height, &error, &joint);
        write_pgm(&maps.join(format!("{index:06}.pgm")), &img)
    })?;
    write_report(out, &report)?;
    Ok(vec![
        kv("rmse", report.rmse),
        kv("delta1", report.delta1),
        kv("n_pixels", report.n_pixels),
        kv("report", out.display()),
        kv("error_maps", maps.display()),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMapInfo {
    pub layer: usize,
    pub file: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSidecar {
    pub grid: usize,
    pub layers: Vec<AttentionMapInfo>,
}

/// Nearest-neighbor upscaling of a `grid × grid` map by `factor`.
fn upscale(map: &GrayImage, factor: usize) -> GrayImage {
    let (w, h) = (map.width * factor, map.height * factor);
    let data = (0..w * h).map(|i| map.data[(i / w / factor) * map.width + (i % w) / factor]).collect();
    GrayImage { width: w, height: h, data }
}

fn export_attention(model_path: &Path, tokens_path: &Path, image_path: &Path, out: &Path) -> Result<Vec<String>> {
    let model = load_model(model_path)?;
    let tokens = load_matching_tokens(tokens_path, &model)?;
    let image = read_ppm(image_path)?;
    let output = forward_with(
        &model,
        &image,
        Some(&tokens),
        &ForwardOptions {
            record_attention: true,
            token_key_mask: None,
        },
    )?;
    let record = output.attention.expect("attention was requested");
    create_dir(out)?;
    let grid = record.grid;
    let mut layers = Vec::new();
    for (layer, att) in record.layers.iter().enumerate() {
        if att.token_to_patch.is_empty() {
            continue;
        }
        let (map, (min, max)) = normalized_image(grid, grid, &att.token_to_patch, &vec![true; grid * grid]);
        let file = format!("layer_{layer}.pgm");
        write_pgm(&out.join(&file), &upscale(&map, model.config.patch_size))?;
        layers.push(AttentionMapInfo { layer, file, min, max });
    }
    let sidecar = out.join("attention.json");
    write_json(&sidecar, &AttentionSidecar { grid, layers: layers.clone() })?;
    Ok(vec![kv("layers", layers.len()), kv("sidecar", sidecar.display())])
}

/// CSV with a `patch,z0,..` header and one row per patch in raster order.
pub fn embeddings_csv(rows: &[Vec<f64>]) -> String {
    let dim = rows.first().map_or(0, Vec::len);
    let mut out = String::from("patch");
    for j in 0..dim {
        out.push_str(&format!(",z{j}"));
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

fn export_embed(model_path: &Path, tokens_path: Option<&Path>, image_path: &Path, out: &Path) -> Result<Vec<String>> {
    let model = load_model(model_path)?;
    let tokens = tokens_path.map(|p| load_matching_tokens(p, &model)).transpose()?;
    let image = read_ppm(image_path)?;
    let rows = export_embeddings(&model, &image, tokens.as_ref())?;
    fs::write(out, embeddings_csv(&rows)).map_err(|e| CaltokError::io(out, e))?;
    Ok(vec![kv("rows", rows.len()), kv("embeddings", out.display())])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        let cases: [&[&str]; 8] = [
            &["caltok", "synth", "--spec", "s.json", "--out", "d"],
            &["caltok", "distort", "--image", "a.ppm", "--pin", "p.json", "--fe", "f.json", "--out", "o.ppm"],
            &["caltok", "undistort", "--image", "a.ppm", "--fe", "f.json", "--pin", "p.json", "--out", "o.ppm"],
            &["caltok", "pretrain", "--data", "d", "--config", "c.json", "--out", "m.ctok"],
            &["caltok", "adapt", "--model", "m.ctok", "--config", "c.json", "--out", "t.ctok"],
            &["caltok", "eval", "--model", "m.ctok", "--data", "d", "--mode", "fisheye", "--out", "r.json"],
            &["caltok", "export-attn", "--model", "m", "--tokens", "t", "--image", "i.ppm", "--out", "o"],
            &["caltok", "export-embed", "--model", "m", "--image", "i.ppm", "--out", "e.csv"],
        ];
        for args in cases {
            assert!(Cli::try_parse_from(args).is_ok(), "{args:?}");
        }
        assert!(Cli::try_parse_from(["caltok"]).is_err());
        assert!(Cli::try_parse_from(["caltok", "eval", "--mode", "sideways"]).is_err());
    }

    #[test]
    fn upscale_repeats_cells() {
        let map = GrayImage {
            width: 2,
            height: 1,
            data: vec![1, 2],
        };
        assert_eq!(upscale(&map, 2).data, vec![1, 1, 2, 2, 1, 1, 2, 2]);
    }

    #[test]
    fn embeddings_csv_layout() {
        let csv = embeddings_csv(&[vec![1.0, -0.5], vec![0.25, 2.0]]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, ["patch,z0,z1", "0,1e0,-5e-1", "1,2.5e-1,2e0"]);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
