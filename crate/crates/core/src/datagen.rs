//! Procedural perspective scenes with exact depth.
//!
//! Each scene is raycast through a pinhole camera at the origin looking down
//! `+z` (`+x` right, `+y` down). It contains a far textured background plane,
//! up to two tilted planes (a ground plane, then a wall) and a handful of
//! spheres. Surfaces carry sinusoidal textures in world units, so apparent
//! texture frequency scales with inverse depth, and are Lambert-shaded by one
//! fixed light. Depth is the `z` coordinate of the first hit.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::PinholeIntrinsics;
use crate::remap::{DepthMap, ImageBuffer};

/// Direction towards the light, up and behind the camera.
const LIGHT: [f64; 3] = [0.4, -1.0, -0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Inclusive range of sphere counts.
    pub spheres: (usize, usize),
    /// Inclusive range of tilted-plane counts (0 to 2).
    pub planes: (usize, usize),
    /// Depth range in meters; the background sits at the far end.
    pub depth_range: (f64, f64),
    /// Texture frequency range in cycles per meter.
    pub texture_frequency: (f64, f64),
    pub pinhole: PinholeIntrinsics,
}

impl SceneSpec {
    pub fn new(seed: u64, pinhole: PinholeIntrinsics) -> Self {
        Self {
            seed,
            spheres: (3, 8),
            planes: (1, 2),
            depth_range: (0.5, 10.0),
            texture_frequency: (0.4, 0.8),
            pinhole,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.depth_range.0 > 0.0
            && self.depth_range.0 < self.depth_range.1
            && self.spheres.0 <= self.spheres.1
            && self.planes.0 <= self.planes.1
            && self.planes.1 <= 2
            && self.texture_frequency.0 > 0.0
            && self.texture_frequency.0 <= self.texture_frequency.1
            && self.pinhole.is_valid()
    }
}

/// A rendered perspective image with its ground-truth depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageBuffer,
    pub depth: DepthMap,
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    albedo: [f64; 3],
    frequency: f64,
    phase: [f64; 2],
    stripes: bool,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, freq: (f64, f64)) -> Self {
        Self {
            albedo: [
                rng.random_range(0.25..1.0),
                rng.random_range(0.25..1.0),
                rng.random_range(0.25..1.0),
            ],
            frequency: if freq.0 < freq.1 { rng.random_range(freq.0..freq.1) } else { freq.0 },
            phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
            stripes: rng.random_bool(0.3),
        }
    }

    fn value(&self, a: f64, b: f64) -> f64 {
        let w = TAU * self.frequency;
        if self.stripes {
            0.5 + 0.5 * libm::sin(w * (a + 0.5 * b) + self.phase[0])
        } else {
            0.5 + 0.5 * libm::sin(w * a + self.phase[0]) * libm::sin(w * b + self.phase[1])
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Points `P` with `n·P = offset`, `n` unit length and pointing away from
    /// the camera.
    Plane { normal: [f64; 3], offset: f64, u: [f64; 3], v: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    texture: Texture,
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = libm::sqrt(dot3(a, a));
    [a[0] / n, a[1] / n, a[2] / n]
}

fn plane(normal: [f64; 3], offset: f64) -> Shape {
    let normal = normalize(normal);
    let helper = if libm::fabs(normal[1]) < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let u = normalize(cross(helper, normal));
    let v = cross(normal, u);
    Shape::Plane { normal, offset, u, v }
}

impl Shape {
    /// Ray parameter of the first hit along `dir` (with `dir.z = 1`, so the
    /// parameter equals depth).
    fn intersect(&self, dir: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Plane { normal, offset, .. } => {
                let nd = dot3(normal, dir);
                (nd > 1e-9).then(|| offset / nd).filter(|&t| t > 0.0)
            }
            Shape::Sphere { center, radius } => {
                let a = dot3(dir, dir);
                let b = dot3(dir, center);
                let c = dot3(center, center) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (b - libm::sqrt(disc)) / a;
                (t > 0.0).then_some(t)
            }
        }
    }

    /// Outward normal at `p` and 2-D surface coordinates in meters.
    fn surface(&self, p: [f64; 3]) -> ([f64; 3], f64, f64) {
        match *self {
            Shape::Plane { normal, u, v, .. } => ([-normal[0], -normal[1], -normal[2]], dot3(p, u), dot3(p, v)),
            Shape::Sphere { center, radius } => {
                let q = normalize([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
                let a = libm::atan2(q[0], -q[2]) * radius;
                let b = libm::asin(q[1].clamp(-1.0, 1.0)) * radius;
                (q, a, b)
            }
        }
    }
}

fn build_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Object, Vec<Object>) {
    let (dmin, dmax) = spec.depth_range;
    let pin = &spec.pinhole;
    let background = Object {
        shape: plane([0.0, 0.0, 1.0], dmax),
        texture: Texture::random(rng, spec.texture_frequency),
    };
    let mut objects = Vec::new();
    let mut ground = None;
    let planes = rng.random_range(spec.planes.0..=spec.planes.1);
    if planes >= 1 {
        // Ground below the camera, slightly pitched and rolled.
        let height = rng.random_range(1.0..1.6) * (dmin / 0.5).min(1.0);
        let pitch = rng.random_range(-0.05..0.05);
        let roll = rng.random_range(-0.05..0.05);
        let shape = plane([libm::sin(roll), 1.0, libm::sin(pitch)], height);
        if let Shape::Plane { normal, offset, .. } = shape {
            ground = Some((normal, offset));
        }
        objects.push(Object {
            shape,
            texture: Texture::random(rng, spec.texture_frequency),
        });
    }
    if planes >= 2 {
        // Wall facing the camera, turned about the vertical axis.
        let yaw: f64 = rng.random_range(-0.6..0.6);
        let distance = rng.random_range(0.45..0.85) * dmax;
        objects.push(Object {
            shape: plane([libm::sin(yaw), 0.0, libm::cos(yaw)], distance),
            texture: Texture::random(rng, spec.texture_frequency),
        });
    }
    let spheres = rng.random_range(spec.spheres.0..=spec.spheres.1);
    for _ in 0..spheres {
        let radius = rng.random_range(0.2..0.9);
        let lo = (dmin + radius + 0.3).min(0.6 * dmax);
        let z = rng.random_range(lo..0.7 * dmax);
        let u = rng.random_range(0.0..pin.width as f64);
        let v = rng.random_range(0.0..pin.height as f64);
        let x = z * (u - pin.cx) / pin.fx;
        // Spheres rest on the ground when there is one: n·c = offset - radius.
        let y = match ground {
            Some((n, offset)) => (offset - radius - n[0] * x - n[2] * z) / n[1],
            None => z * (v - pin.cy) / pin.fy,
        };
        objects.push(Object {
            shape: Shape::Sphere {
                center: [x, y, z],
                radius,
            },
            texture: Texture::random(rng, spec.texture_frequency),
        });
    }
    (background, objects)
}

/// Renders scene `index` of `spec`. Deterministic per `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (background, objects) = build_objects(spec, &mut rng);
    let pin = &spec.pinhole;
    let (dmin, dmax) = spec.depth_range;
    let (w, h) = (pin.width, pin.height);
    let light = normalize(LIGHT);

    let mut image = ImageBuffer::new(w, h, 3);
    let mut depth = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dir = [(x as f64 - pin.cx) / pin.fx, (y as f64 - pin.cy) / pin.fy, 1.0];
            let mut best = (background.shape.intersect(dir).unwrap_or(dmax), &background);
            for obj in &objects {
                if let Some(t) = obj.shape.intersect(dir) {
                    if t < best.0 {
                        best = (t, obj);
                    }
                }
            }
            let (t, obj) = best;
            let p = [dir[0] * t, dir[1] * t, dir[2] * t];
            let (normal, a, b) = obj.shape.surface(p);
            let lambert = dot3(normal, light).max(0.0);
            let shade = 0.3 + 0.7 * lambert;
            let tex = 0.3 + 0.7 * obj.texture.value(a, b);
            for c in 0..3 {
                image.data[(y * w + x) * 3 + c] = (obj.texture.albedo[c] * tex * shade).clamp(0.0, 1.0) as f32;
            }
            depth.push(t.clamp(dmin, dmax));
        }
    }
    Scene {
        image,
        depth: DepthMap::new(w, h, depth),
    }
}

/// Renders `count` consecutive scenes starting at `start`.
pub fn generate_scenes(spec: &SceneSpec, start: u64, count: usize) -> Vec<Scene> {
    (start..start + count as u64).map(|i| generate_scene(spec, i)).collect()
}
