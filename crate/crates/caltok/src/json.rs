use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CaltokError, Result};
use crate::netpbm::{read_bytes, write_bytes};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| CaltokError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty-printed, newline-terminated.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| CaltokError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}
