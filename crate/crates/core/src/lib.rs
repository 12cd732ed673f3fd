//! Calibration tokens for adapting a perspective-trained depth transformer to
//! fisheye cameras.
//!
//! The crate is `no_std` and only needs an allocator. It contains:
//!
//! - [`geometry`]: the Kannala-Brandt radial model `r(θ) = k₁θ + k₂θ³ + k₃θ⁵ + k₄θ⁷`,
//!   its safeguarded Newton inverse and the per-pixel perspective/fisheye maps.
//! - [`remap`]: dense warp fields, image and depth resampling, coverage loss.
//! - [`tinyvit`]: a small pre-norm vision transformer that regresses depth, with
//!   trainable calibration tokens in three injection modes and hand-written
//!   reverse-mode gradients.
//! - [`objective`]: LogL1/L1 undo-warp losses, Adam, and the pretraining and
//!   token-adaptation loops.
//! - [`datagen`]: procedural raycast scenes with exact depth.
//! - [`metrics`]: RMSE, δ₁ and the perspective/fisheye evaluation protocol.
//!
//! File formats, checkpoints and the command-line tool live in the `caltok`
//! crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod datagen;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod remap;
pub mod tinyvit;

pub use error::Error;
