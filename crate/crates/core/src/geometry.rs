//! Kannala-Brandt fisheye geometry.
//!
//! The radial model maps the incidence angle θ of a ray to a dimensionless
//! image radius
//!
//! ```text
//! r(θ) = k₁θ + k₂θ³ + k₃θ⁵ + k₄θ⁷
//! ```
//!
//! A perspective pixel `(x, y)` with intrinsics `(fx, fy, cx, cy)` has
//! normalized radius `ρ = √(((x-cx)/fx)² + ((y-cy)/fy)²)`, incidence angle
//! `θ = atan(ρ)` and azimuth `φ = atan2((y-cy)/fy, (x-cx)/fx)`. Its fisheye
//! image is `(cx_f + s·r(θ)·cos φ, cy_f + s·r(θ)·sin φ)` where `s` is the
//! fisheye pixel scale. The inverse recovers θ from `r` by safeguarded Newton
//! iteration.
//!
//! Pixel coordinates are continuous with the pixel-center convention: integer
//! coordinates are pixel centers, and a coordinate is in bounds when it lies in
//! `[0, width-1] × [0, height-1]`.

use core::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Number of grid intervals used by [`check_monotone`].
pub const MONOTONE_GRID: usize = 4096;
/// Residual tolerance guaranteed by [`radial_inverse`].
pub const INVERSE_TOLERANCE: f64 = 1e-10;
/// Newton iteration cap before the inverse falls back to pure bisection.
pub const MAX_NEWTON_ITERATIONS: usize = 50;
/// Rays closer than this to 90° cannot be represented in a perspective image.
pub const PERSPECTIVE_ANGLE_MARGIN: f64 = 1e-6;
/// Rejection-sampling cap of [`sample_random_calibration`].
pub const MAX_SAMPLING_ATTEMPTS: usize = 1000;

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeIntrinsics {
    /// Square image with the principal point at the image center.
    pub fn centered(size: usize, focal: f64) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
            width: size,
            height: size,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        in_bounds(p, self.width, self.height)
    }
}

/// Fisheye calibration: distortion coefficients, principal point, pixel scale
/// of `r(θ)`, and the maximum incidence angle of the lens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisheyeCalibration {
    pub k: [f64; 4],
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub theta_max: f64,
    pub width: usize,
    pub height: usize,
}

impl FisheyeCalibration {
    /// Radius of the image circle in pixels.
    pub fn circle_radius(&self) -> f64 {
        self.scale * radial_forward(self.theta_max, &self.k)
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        in_bounds(p, self.width, self.height)
    }

    /// Validates monotonicity once so that many inversions can skip the check.
    pub fn lens(&self) -> Result<FisheyeLens, GeometryError> {
        FisheyeLens::new(*self)
    }
}

/// Continuous pixel coordinate (column `x`, row `y`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Result of a pixel transform. `valid` is false when the source lies outside
/// the domain of the transform or the result falls outside the target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mapped {
    pub point: PixelCoord,
    pub valid: bool,
}

fn in_bounds(p: PixelCoord, width: usize, height: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (width as f64 - 1.0) && p.y <= (height as f64 - 1.0)
}

/// `k₁θ + k₂θ³ + k₃θ⁵ + k₄θ⁷`, Horner form in θ².
#[inline]
pub fn radial_forward(theta: f64, k: &[f64; 4]) -> f64 {
    let u = theta * theta;
    theta * (k[0] + u * (k[1] + u * (k[2] + u * k[3])))
}

/// `dr/dθ = k₁ + 3k₂θ² + 5k₃θ⁴ + 7k₄θ⁶`.
#[inline]
pub fn radial_derivative(theta: f64, k: &[f64; 4]) -> f64 {
    let u = theta * theta;
    k[0] + u * (3.0 * k[1] + u * (5.0 * k[2] + u * 7.0 * k[3]))
}

/// True iff `r'(θ) > 0` on a uniform grid of [`MONOTONE_GRID`] intervals over
/// `[0, theta_max]`, endpoint included.
pub fn check_monotone(k: &[f64; 4], theta_max: f64) -> bool {
    if !(theta_max > 0.0 && theta_max <= FRAC_PI_2) || k.iter().any(|c| !c.is_finite()) {
        return false;
    }
    let step = theta_max / MONOTONE_GRID as f64;
    (0..MONOTONE_GRID).all(|i| radial_derivative(step * i as f64, k) > 0.0)
        && radial_derivative(theta_max, k) > 0.0
}

/// Solves `r(θ) = r` for θ in `[0, theta_max]`.
///
/// Fails with [`GeometryError::NonMonotone`] when the polynomial is not
/// strictly increasing on the interval, and with
/// [`GeometryError::OutOfRange`] when `r` lies outside `[0, r(theta_max)]`.
pub fn radial_inverse(r: f64, k: &[f64; 4], theta_max: f64) -> Result<f64, GeometryError> {
    if !check_monotone(k, theta_max) {
        return Err(GeometryError::NonMonotone);
    }
    invert_monotone(r, k, theta_max, radial_forward(theta_max, k))
}

/// Safeguarded Newton iteration on a bracket known to contain the root.
fn invert_monotone(r: f64, k: &[f64; 4], theta_max: f64, r_max: f64) -> Result<f64, GeometryError> {
    let slack = 1e-12 * r_max.max(1.0);
    if !r.is_finite() || r < -slack || r > r_max + slack {
        return Err(GeometryError::OutOfRange { r, r_max });
    }
    if r <= 0.0 {
        return Ok(0.0);
    }
    if r >= r_max {
        return Ok(theta_max);
    }

    let (mut lo, mut hi) = (0.0, theta_max);
    let mut theta = r / k[0];
    if !(theta > lo && theta < hi) {
        theta = 0.5 * (lo + hi);
    }
    for _ in 0..MAX_NEWTON_ITERATIONS {
        let f = radial_forward(theta, k) - r;
        if f == 0.0 {
            return Ok(theta);
        }
        if f < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let mut next = theta - f / radial_derivative(theta, k);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = libm::fabs(next - theta) <= 4.0 * f64::EPSILON * theta.max(1e-300);
        theta = next;
        if done {
            break;
        }
    }
    // Bisection polish in case Newton stalled on a flat stretch.
    let mut iterations = 0;
    while libm::fabs(radial_forward(theta, k) - r) >= INVERSE_TOLERANCE && iterations < 200 {
        if radial_forward(theta, k) < r {
            lo = theta;
        } else {
            hi = theta;
        }
        theta = 0.5 * (lo + hi);
        iterations += 1;
    }
    Ok(theta)
}

/// Perspective pixel to fisheye pixel (the transform `T`).
pub fn perspective_to_fisheye(p: PixelCoord, pin: &PinholeIntrinsics, fe: &FisheyeCalibration) -> Mapped {
    let nx = (p.x - pin.cx) / pin.fx;
    let ny = (p.y - pin.cy) / pin.fy;
    let rho = libm::hypot(nx, ny);
    let theta = libm::atan(rho);
    let phi = libm::atan2(ny, nx);
    let radius = fe.scale * radial_forward(theta, &fe.k);
    let point = PixelCoord::new(fe.cx + radius * libm::cos(phi), fe.cy + radius * libm::sin(phi));
    Mapped {
        point,
        valid: theta <= fe.theta_max && fe.contains(point),
    }
}

/// Fisheye pixel to perspective pixel (the transform `T⁻¹`).
///
/// Checks monotonicity on every call; use [`FisheyeLens`] for dense work.
pub fn fisheye_to_perspective(
    p: PixelCoord,
    fe: &FisheyeCalibration,
    pin: &PinholeIntrinsics,
) -> Result<Mapped, GeometryError> {
    Ok(fe.lens()?.to_perspective(p, pin))
}

/// A fisheye calibration whose distortion polynomial has been verified to be
/// monotone, with the image-circle radius cached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisheyeLens {
    calibration: FisheyeCalibration,
    r_max: f64,
}

impl FisheyeLens {
    pub fn new(calibration: FisheyeCalibration) -> Result<Self, GeometryError> {
        if !check_monotone(&calibration.k, calibration.theta_max) || !(calibration.scale > 0.0) {
            return Err(GeometryError::NonMonotone);
        }
        Ok(Self {
            calibration,
            r_max: radial_forward(calibration.theta_max, &calibration.k),
        })
    }

    pub fn calibration(&self) -> &FisheyeCalibration {
        &self.calibration
    }

    /// `r(theta_max)`, the dimensionless image-circle radius.
    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// [`radial_inverse`] without the per-call monotonicity check.
    pub fn incidence_angle(&self, r: f64) -> Result<f64, GeometryError> {
        invert_monotone(r, &self.calibration.k, self.calibration.theta_max, self.r_max)
    }

    pub fn to_fisheye(&self, p: PixelCoord, pin: &PinholeIntrinsics) -> Mapped {
        perspective_to_fisheye(p, pin, &self.calibration)
    }

    pub fn to_perspective(&self, p: PixelCoord, pin: &PinholeIntrinsics) -> Mapped {
        let fe = &self.calibration;
        let dx = p.x - fe.cx;
        let dy = p.y - fe.cy;
        let r = libm::hypot(dx, dy) / fe.scale;
        let phi = libm::atan2(dy, dx);
        let (theta, in_circle) = match self.incidence_angle(r) {
            Ok(theta) => (theta, true),
            Err(_) => (fe.theta_max, false),
        };
        let t = libm::tan(theta);
        let point = PixelCoord::new(pin.cx + pin.fx * t * libm::cos(phi), pin.cy + pin.fy * t * libm::sin(phi));
        Mapped {
            point,
            valid: in_circle && theta < FRAC_PI_2 - PERSPECTIVE_ANGLE_MARGIN && pin.contains(point),
        }
    }
}

/// Ranges for [`sample_random_calibration`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub width: usize,
    pub height: usize,
    pub theta_max: (f64, f64),
    pub k2: (f64, f64),
    pub k3: (f64, f64),
    pub k4: (f64, f64),
}

impl SamplingConfig {
    /// Default ranges for a `width × height` fisheye frame.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            theta_max: (1.05, 1.66),
            k2: (-1.0, -0.01),
            k3: (-0.1, -0.001),
            k4: (-0.01, -0.0001),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a random monotone fisheye calibration whose image circle is
/// inscribed in the output frame. `k₁` is fixed to 1.
pub fn sample_random_calibration(seed: u64, template: &SamplingConfig) -> Result<FisheyeCalibration, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let k = [
            1.0,
            uniform(&mut rng, template.k2),
            uniform(&mut rng, template.k3),
            uniform(&mut rng, template.k4),
        ];
        let theta_max = uniform(&mut rng, template.theta_max).min(FRAC_PI_2);
        if !check_monotone(&k, theta_max) {
            continue;
        }
        let half = template.width.min(template.height) as f64 / 2.0;
        return Ok(FisheyeCalibration {
            k,
            cx: (template.width as f64 - 1.0) / 2.0,
            cy: (template.height as f64 - 1.0) / 2.0,
            scale: half / radial_forward(theta_max, &k),
            theta_max,
            width: template.width,
            height: template.height,
        });
    }
    Err(GeometryError::SamplingExhausted {
        attempts: MAX_SAMPLING_ATTEMPTS,
    })
}
