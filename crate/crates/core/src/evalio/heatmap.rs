//! 8-bit binary PGM heatmaps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Min-max normalizes to `0..=255`; constant maps give all zeros.
pub fn normalize_u8<T: Scalar>(map: &Tensor<T>) -> Result<Vec<u8>> {
    if !map.is_finite() {
        return Err(Error::NonFinite("heatmap values".into()));
    }
    if map.is_empty() {
        return Ok(Vec::new());
    }
    let (lo, hi) = (map.min().to_f64_lossy(), map.max().to_f64_lossy());
    let span = hi - lo;
    Ok(map
        .data()
        .iter()
        .map(|v| {
            if span > 0.0 {
                (255.0 * (v.to_f64_lossy() - lo) / span).round() as u8
            } else {
                0
            }
        })
        .collect())
}

/// `P5` header followed by one byte per pixel.
pub fn pgm_bytes<T: Scalar>(map: &Tensor<T>) -> Result<Vec<u8>> {
    let [h, w] = *map.shape() else {
        return Err(Error::Shape(format!("heatmap must be [H, W], got {:?}", map.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(normalize_u8(map)?);
    Ok(out)
}

pub fn export_heatmap<T: Scalar>(map: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, pgm_bytes(map)?)?;
    Ok(())
}

/// Parses a `P5` file with maxval 255 into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Shape("malformed PGM".into());
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let body = &bytes[at + 1..];
    if body.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, body.to_vec()))
}
