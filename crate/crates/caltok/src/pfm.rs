//! Grayscale portable float maps for depth.
//!
//! Files are written little-endian (negative scale) with rows stored bottom to
//! top. A depth map with invalid pixels gets a sibling `<stem>.mask.pgm`;
//! without one every finite pixel is valid.

use std::fs;
use std::path::{Path, PathBuf};

use caltok_core::remap::DepthMap;

use crate::error::{CaltokError, Result};
use crate::netpbm::{decode_pgm, mask_image, read_bytes, write_bytes, write_pgm};

pub fn encode_pfm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "PFM payload size");
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for &v in &values[y * width..(y + 1) * width] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Returns `(width, height, values)` in top-to-bottom row order.
pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            pos += 1;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?);
    }
    if tokens[0] != "Pf" {
        return Err(format!("expected magic Pf, got {}", tokens[0]));
    }
    let width: usize = tokens[1].parse().map_err(|_| "bad width")?;
    let height: usize = tokens[2].parse().map_err(|_| "bad height")?;
    let scale: f64 = tokens[3].parse().map_err(|_| "bad scale")?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err("invalid header values".into());
    }
    // Exactly one whitespace byte separates the header from the payload.
    let start = pos + 1;
    let n = width * height;
    let data = bytes.get(start..start + 4 * n).ok_or_else(|| format!("expected {} payload bytes", 4 * n))?;
    let mut values = vec![0.0; n];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (height - 1 - i / width, i % width);
        values[row * width + col] = f64::from(v);
    }
    Ok((width, height, values))
}

/// `dir/name.pfm` to `dir/name.mask.pgm`.
pub fn mask_path(path: &Path) -> PathBuf {
    path.with_extension("mask.pgm")
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let values: Vec<f64> = depth.depth.iter().zip(&depth.mask).map(|(&d, &m)| if m { d } else { 0.0 }).collect();
    write_bytes(path, &encode_pfm(depth.width, depth.height, &values))?;
    let mask = mask_path(path);
    if depth.mask.iter().all(|&m| m) {
        if mask.exists() {
            fs::remove_file(&mask).map_err(|e| CaltokError::io(&mask, e))?;
        }
        Ok(())
    } else {
        write_pgm(&mask, &mask_image(depth.width, depth.height, &depth.mask))
    }
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let (width, height, values) = decode_pfm(&read_bytes(path)?).map_err(|m| CaltokError::format(path, m))?;
    let mut depth = DepthMap::new(width, height, values);
    let mask = mask_path(path);
    if mask.exists() {
        let m = decode_pgm(&read_bytes(&mask)?).map_err(|msg| CaltokError::format(&mask, msg))?;
        if (m.width, m.height) != (width, height) {
            return Err(CaltokError::format(&mask, "mask size differs from depth size"));
        }
        depth.mask = m.data.iter().map(|&b| b > 127).collect();
    }
    for (m, d) in depth.mask.iter_mut().zip(&depth.depth) {
        *m &= d.is_finite();
    }
    Ok(depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values_and_row_order() {
        let values: Vec<f64> = (0..12).map(|i| f64::from(i as f32 * 0.37 + 0.5)).collect();
        let (w, h, back) = decode_pfm(&encode_pfm(4, 3, &values)).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, values);
    }

    #[test]
    fn first_stored_row_is_the_bottom_row() {
        let bytes = encode_pfm(1, 2, &[1.0, 2.0]);
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(payload[..4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn big_endian_files_are_read() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().2, vec![1.5, 2.5]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n1 1\n0\n\0\0\0\0").is_err());
    }

    #[test]
    fn mask_sibling_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let mut d = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        d.mask[1] = false;
        write_depth(&path, &d).unwrap();
        assert!(mask_path(&path).exists());
        let back = read_depth(&path).unwrap();
        assert_eq!(back.mask, d.mask);
        assert_eq!(back.depth[1], 0.0);
        write_depth(&path, &DepthMap::constant(2, 2, 1.0)).unwrap();
        assert!(!mask_path(&path).exists());
        assert!(read_depth(&path).unwrap().mask.iter().all(|&m| m));
    }
}
