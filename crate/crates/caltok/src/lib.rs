//! Files, checkpoints, datasets and the command-line tool around
//! [`caltok_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod json;
pub mod netpbm;
pub mod pfm;
pub mod report;

pub use error::{CaltokError, Result};
