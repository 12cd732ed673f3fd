//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use caltok_core::remap::ImageBuffer;

use crate::error::{CaltokError, Result};

/// An 8-bit single-channel raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// `[0, 1]` to `0..=255`, clamping out-of-range samples.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header field out of range")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing separator after header".into());
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    Ok(Header {
        width,
        height,
        data_start: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> std::result::Result<&'a [u8], String> {
    let n = h.width * h.height * channels;
    bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| format!("expected {n} sample bytes"))
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    assert_eq!(img.channels, 3, "PPM needs three channels");
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let h = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &h, 3)?;
    Ok(ImageBuffer {
        width: h.width,
        height: h.height,
        channels: 3,
        data: data.iter().map(|&b| f32::from(b) / 255.0).collect(),
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let h = parse_header(bytes, b"P5")?;
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        data: payload(bytes, &h, 1)?.to_vec(),
    })
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CaltokError::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CaltokError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    decode_ppm(&read_bytes(path)?).map_err(|m| CaltokError::format(path, m))
}

pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path)?).map_err(|m| CaltokError::format(path, m))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(img))
}

/// Validity mask as a PGM: 255 valid, 0 invalid.
pub fn mask_image(width: usize, height: usize, mask: &[bool]) -> GrayImage {
    GrayImage {
        width,
        height,
        data: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    }
}

/// Linear map of `values` onto `0..=255` over the pixels where `mask` holds.
/// Returns the image and the `(min, max)` used.
pub fn normalized_image(width: usize, height: usize, values: &[f64], mask: &[bool]) -> (GrayImage, (f64, f64)) {
    let (lo, hi) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = hi - lo;
    let data = values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| match (m, span > 0.0) {
            (false, _) => 0,
            (true, true) => ((v - lo) / span * 255.0).round() as u8,
            (true, false) => 0,
        })
        .collect();
    (GrayImage { width, height, data }, (lo, hi))
}
