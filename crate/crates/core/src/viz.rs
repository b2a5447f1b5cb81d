//! Heatmap colouring and Grad-CAM overlays as 8-bit RGB.

use crate::error::{CastError, Result};
use crate::image::{to_byte, Image};

/// Blue → cyan → yellow → red ramp over `[0, 1]`.
pub fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [to_byte(r), to_byte(g), to_byte(b)]
}

/// Grid map scaled by its maximum and upsampled by pixel replication to
/// `size × size`; a map without a positive maximum stays zero.
pub fn upsample_normalized(map: &[f32], grid: usize, size: usize) -> Result<Vec<f32>> {
    if grid == 0 || map.len() != grid * grid || !size.is_multiple_of(grid) {
        return Err(CastError::shape(
            "heatmap",
            format!("{} values on a {grid}x{grid} grid for {size} pixels", map.len()),
        ));
    }
    let max = map.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let k = size / grid;
    Ok((0..size * size)
        .map(|i| map[(i / size / k) * grid + (i % size) / k] * scale)
        .collect())
}

/// Interleaved RGB bytes of `round(0.5 · image + 0.5 · colormap(G))`.
pub fn overlay(image: &Image, map: &[f32], grid: usize) -> Result<Vec<u8>> {
    if image.height != image.width {
        return Err(CastError::shape("overlay", "image must be square"));
    }
    let heat = upsample_normalized(map, grid, image.width)?;
    let mut out = Vec::with_capacity(3 * heat.len());
    for (i, &h) in heat.iter().enumerate() {
        let (y, x) = (i / image.width, i % image.width);
        let c = colormap(h);
        for ch in 0..3 {
            let blended = 0.5 * to_byte(image.get(ch, y, x)) as f32 + 0.5 * c[ch] as f32;
            out.push(blended.round() as u8);
        }
    }
    Ok(out)
}
