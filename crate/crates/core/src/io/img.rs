//! Minimal binary PGM/PPM writers for frame heatmaps and signed error maps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

/// 8-bit grayscale PGM, values scaled linearly by the frame maximum
/// (an all-zero frame maps to black).
pub fn write_pgm(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    assert_eq!(values.len(), h * w);
    let max = values.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", w, h)?;
    for &v in values {
        out.write_all(&[(v.max(0.0) * scale).round().min(255.0) as u8])?;
    }
    out.flush()?;
    Ok(())
}

/// Signed red-white-blue PPM: positive values shade toward red, negative
/// toward blue, linearly over a symmetric range of max |value|.
pub fn write_ppm_signed(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(values.len(), h * w);
    let amp = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    for &v in values {
        let t = if amp > 0.0 { (v / amp).clamp(-1.0, 1.0) } else { 0.0 };
        let fade = ((1.0 - t.abs()) * 255.0).round() as u8;
        let (r, g, b) = if t >= 0.0 { (255u8, fade, fade) } else { (fade, fade, 255u8) };
        out.write_all(&[r, g, b])?;
    }
    out.flush()?;
    Ok(())
}
