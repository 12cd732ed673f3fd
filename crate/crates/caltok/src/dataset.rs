//! Synthetic datasets on disk.
//!
//! ```text
//! <root>/manifest.json
//! <root>/scenes/{train,val,test}/{index:06}.ppm
//! <root>/scenes/{train,val,test}/{index:06}.pfm
//! ```
//!
//! Scene indices are global, so the three splits cover disjoint ranges.

use std::fs;
use std::path::{Path, PathBuf};

use caltok_core::datagen::{generate_scene, Scene, SceneSpec};
use caltok_core::geometry::PinholeIntrinsics;
use serde::{Deserialize, Serialize};

use crate::error::{CaltokError, Result};
use crate::json::{read_json, write_json};
use crate::netpbm::{read_ppm, write_ppm};
use crate::pfm::{read_depth, write_depth};

pub const MANIFEST: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Default desk-scale focal length in pixels for 64-pixel scenes.
pub const DEFAULT_FOCAL: f64 = 16.0;

fn default_image_size() -> usize {
    64
}

fn default_focal() -> f64 {
    DEFAULT_FOCAL
}

/// Input document of `caltok synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Focal length in pixels; the principal point is the image center.
    #[serde(default = "default_focal")]
    pub focal: f64,
    #[serde(default)]
    pub spheres: Option<(usize, usize)>,
    #[serde(default)]
    pub planes: Option<(usize, usize)>,
    #[serde(default)]
    pub depth_range: Option<(f64, f64)>,
    #[serde(default)]
    pub texture_frequency: Option<(f64, f64)>,
}

impl DatasetSpec {
    pub fn pinhole(&self) -> PinholeIntrinsics {
        PinholeIntrinsics::centered(self.image_size, self.focal)
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let mut s = SceneSpec::new(self.seed, self.pinhole());
        s.spheres = self.spheres.unwrap_or(s.spheres);
        s.planes = self.planes.unwrap_or(s.planes);
        s.depth_range = self.depth_range.unwrap_or(s.depth_range);
        s.texture_frequency = self.texture_frequency.unwrap_or(s.texture_frequency);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(CaltokError::Config("every split needs at least one scene".into()));
        }
        if self.image_size == 0 || !(self.focal > 0.0) {
            return Err(CaltokError::Config("image_size and focal must be positive".into()));
        }
        if !self.scene_spec().is_valid() {
            return Err(CaltokError::Config("invalid scene ranges".into()));
        }
        Ok(())
    }

    fn counts(&self) -> [usize; 3] {
        [self.n_train, self.n_val, self.n_test]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub name: String,
    pub start: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub split: String,
    pub index: u64,
    /// Paths relative to the dataset root.
    pub image: String,
    pub depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub pinhole: PinholeIntrinsics,
    pub splits: Vec<SplitRange>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Option<&SplitRange> {
        self.splits.iter().find(|s| s.name == name)
    }
}

fn relative(split: &str, index: u64, ext: &str) -> String {
    format!("scenes/{split}/{index:06}.{ext}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CaltokError::io(path, e))
}

/// Renders every split of `spec` under `root` and writes the manifest.
pub fn generate_split(spec: &DatasetSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    let scene_spec = spec.scene_spec();
    let mut splits = Vec::new();
    let mut files = Vec::new();
    let mut start = 0u64;
    for (name, count) in SPLITS.iter().zip(spec.counts()) {
        create_dir(&root.join("scenes").join(name))?;
        for index in start..start + count as u64 {
            let scene = generate_scene(&scene_spec, index);
            let entry = FileEntry {
                split: (*name).into(),
                index,
                image: relative(name, index, "ppm"),
                depth: relative(name, index, "pfm"),
            };
            write_ppm(&root.join(&entry.image), &scene.image)?;
            write_depth(&root.join(&entry.depth), &scene.depth)?;
            files.push(entry);
        }
        splits.push(SplitRange {
            name: (*name).into(),
            start,
            count,
        });
        start += count as u64;
    }
    let manifest = Manifest {
        spec: spec.clone(),
        pinhole: spec.pinhole(),
        splits,
        files,
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    read_json(&root.join(MANIFEST))
}

/// Reads every scene of `split` in index order.
pub fn load_split(root: &Path, manifest: &Manifest, split: &str) -> Result<Vec<Scene>> {
    if manifest.split(split).is_none() {
        return Err(CaltokError::Config(format!("unknown split {split}")));
    }
    manifest
        .files
        .iter()
        .filter(|f| f.split == split)
        .map(|f| {
            let image_path: PathBuf = root.join(&f.image);
            let depth_path: PathBuf = root.join(&f.depth);
            let image = read_ppm(&image_path)?;
            let depth = read_depth(&depth_path)?;
            if (image.width, image.height) != (depth.width, depth.height) {
                return Err(CaltokError::format(&depth_path, "depth size differs from image size"));
            }
            Ok(Scene { image, depth })
        })
        .collect()
}
