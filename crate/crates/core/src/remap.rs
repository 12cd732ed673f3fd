//! Dense warp fields between the perspective and fisheye frames.
//!
//! Resampling uses inverse mapping: every output pixel stores the continuous
//! coordinate it reads from in the source image. RGB is resampled bilinearly,
//! depth by nearest neighbor. Border handling is strict; an output pixel whose
//! source (or any bilinear tap with nonzero weight) leaves the source frame is
//! masked out and set to zero.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{GeometryError, ShapeError};
use crate::geometry::{FisheyeCalibration, FisheyeLens, PinholeIntrinsics, PixelCoord};

/// Row-major image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Dense depth in meters with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    /// Fully valid depth map.
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Self {
        assert_eq!(depth.len(), width * height);
        Self {
            width,
            height,
            mask: vec![true; depth.len()],
            depth,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpDirection {
    /// Output grid is the fisheye frame; sources are perspective pixels.
    ToFisheye,
    /// Output grid is the perspective frame; sources are fisheye pixels.
    ToPerspective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Per-output-pixel source coordinates and validity.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub out_width: usize,
    pub out_height: usize,
    pub src_width: usize,
    pub src_height: usize,
    pub src: Vec<PixelCoord>,
    pub mask: Vec<bool>,
    pub direction: WarpDirection,
}

impl WarpField {
    /// Warp that reads every pixel from itself.
    pub fn identity(width: usize, height: usize, direction: WarpDirection) -> Self {
        let src = (0..height)
            .flat_map(|y| (0..width).map(move |x| PixelCoord::new(x as f64, y as f64)))
            .collect::<Vec<_>>();
        Self {
            out_width: width,
            out_height: height,
            src_width: width,
            src_height: height,
            mask: vec![true; src.len()],
            src,
            direction,
        }
    }

    /// Source pixel read by output pixel `i` under nearest-neighbor sampling.
    #[inline]
    pub fn nearest_source(&self, i: usize) -> Option<usize> {
        if !self.mask[i] {
            return None;
        }
        let p = self.src[i];
        let x = libm::floor(p.x + 0.5);
        let y = libm::floor(p.y + 0.5);
        if x < 0.0 || y < 0.0 || x > (self.src_width - 1) as f64 || y > (self.src_height - 1) as f64 {
            return None;
        }
        Some(y as usize * self.src_width + x as usize)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Builds the warp field for `direction` between `pin` and `fe`.
pub fn build_warp_field(
    direction: WarpDirection,
    pin: &PinholeIntrinsics,
    fe: &FisheyeCalibration,
) -> Result<WarpField, GeometryError> {
    Ok(build_warp_field_with(direction, pin, &fe.lens()?))
}

pub fn build_warp_field_with(direction: WarpDirection, pin: &PinholeIntrinsics, lens: &FisheyeLens) -> WarpField {
    let fe = lens.calibration();
    let (out_width, out_height, src_width, src_height) = match direction {
        WarpDirection::ToFisheye => (fe.width, fe.height, pin.width, pin.height),
        WarpDirection::ToPerspective => (pin.width, pin.height, fe.width, fe.height),
    };
    let mut src = Vec::with_capacity(out_width * out_height);
    let mut mask = Vec::with_capacity(out_width * out_height);
    for y in 0..out_height {
        for x in 0..out_width {
            let p = PixelCoord::new(x as f64, y as f64);
            let m = match direction {
                WarpDirection::ToFisheye => lens.to_perspective(p, pin),
                WarpDirection::ToPerspective => lens.to_fisheye(p, pin),
            };
            src.push(m.point);
            mask.push(m.valid);
        }
    }
    WarpField {
        out_width,
        out_height,
        src_width,
        src_height,
        src,
        mask,
        direction,
    }
}

/// Bilinear taps as `(x0, x1, wx, y0, y1, wy)`; `None` when a tap with nonzero
/// weight falls outside the source frame.
#[inline]
fn bilinear_taps(p: PixelCoord, width: usize, height: usize) -> Option<(usize, usize, f64, usize, usize, f64)> {
    if !(p.x >= 0.0 && p.y >= 0.0) {
        return None;
    }
    let fx = libm::floor(p.x);
    let fy = libm::floor(p.y);
    let (wx, wy) = (p.x - fx, p.y - fy);
    let (x0, y0) = (fx as usize, fy as usize);
    let x1 = if wx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if wy > 0.0 { y0 + 1 } else { y0 };
    if x1 >= width || y1 >= height {
        return None;
    }
    Some((x0, x1, wx, y0, y1, wy))
}

fn sample_pixel(img: &ImageBuffer, w: &WarpField, i: usize, interp: Interpolation, out: &mut [f32]) -> bool {
    if !w.mask[i] {
        return false;
    }
    match interp {
        Interpolation::Nearest => match w.nearest_source(i) {
            Some(j) => {
                out.copy_from_slice(&img.data[j * img.channels..(j + 1) * img.channels]);
                true
            }
            None => false,
        },
        Interpolation::Bilinear => match bilinear_taps(w.src[i], img.width, img.height) {
            Some((x0, x1, wx, y0, y1, wy)) => {
                for (c, o) in out.iter_mut().enumerate() {
                    let top = (1.0 - wx) * img.get(x0, y0, c) as f64 + wx * img.get(x1, y0, c) as f64;
                    let bottom = (1.0 - wx) * img.get(x0, y1, c) as f64 + wx * img.get(x1, y1, c) as f64;
                    *o = ((1.0 - wy) * top + wy * bottom) as f32;
                }
                true
            }
            None => false,
        },
    }
}

fn check_source(w: &WarpField, width: usize, height: usize) -> Result<(), ShapeError> {
    if (w.src_width, w.src_height) != (width, height) {
        return Err(ShapeError::DimensionMismatch {
            expected: (w.src_width, w.src_height),
            actual: (width, height),
        });
    }
    Ok(())
}

/// Resamples `img` through `w`. Masked-out pixels are zero.
pub fn apply_warp(img: &ImageBuffer, w: &WarpField, interp: Interpolation) -> Result<(ImageBuffer, Vec<bool>), ShapeError> {
    check_source(w, img.width, img.height)?;
    let mut out = ImageBuffer::new(w.out_width, w.out_height, img.channels);
    let mut mask = vec![false; w.out_width * w.out_height];
    for (i, m) in mask.iter_mut().enumerate() {
        let px = &mut out.data[i * img.channels..(i + 1) * img.channels];
        *m = sample_pixel(img, w, i, interp, px);
        if !*m {
            px.fill(0.0);
        }
    }
    Ok((out, mask))
}

/// Nearest-neighbor depth resampling; the output mask is the warp mask AND the
/// source mask. Masked-out depths are zero.
pub fn apply_warp_depth(d: &DepthMap, w: &WarpField) -> Result<DepthMap, ShapeError> {
    check_source(w, d.width, d.height)?;
    let n = w.out_width * w.out_height;
    let mut depth = vec![0.0; n];
    let mut mask = vec![false; n];
    for i in 0..n {
        if let Some(j) = w.nearest_source(i) {
            if d.mask[j] {
                depth[i] = d.depth[j];
                mask[i] = true;
            }
        }
    }
    Ok(DepthMap {
        width: w.out_width,
        height: w.out_height,
        depth,
        mask,
    })
}

/// Adjoint of [`apply_warp_depth`]: scatters per-output gradients back onto the
/// source pixels they were read from.
pub fn scatter_depth_adjoint(w: &WarpField, source: &DepthMap, adjoint: &[f64]) -> Result<Vec<f64>, ShapeError> {
    check_source(w, source.width, source.height)?;
    if adjoint.len() != w.out_width * w.out_height {
        return Err(ShapeError::ShapeMismatch {
            what: "warp adjoint",
            expected: w.out_width * w.out_height,
            actual: adjoint.len(),
        });
    }
    let mut grad = vec![0.0; source.len()];
    for (i, &g) in adjoint.iter().enumerate() {
        if let Some(j) = w.nearest_source(i) {
            if source.mask[j] {
                grad[j] += g;
            }
        }
    }
    Ok(grad)
}

/// Fraction of output pixels without a valid source.
pub fn coverage_loss(w: &WarpField) -> f64 {
    let total = w.out_width * w.out_height;
    if total == 0 {
        return 0.0;
    }
    1.0 - w.valid_count() as f64 / total as f64
}
