//! Binary PPM (P6) frame grids.

use std::fs;
use std::path::Path;

use crate::dataset::quantize;
use crate::error::{invalid, io_err, Result};

/// Lays out `rows[r][c]` RGB frames of `height × width` into one image.
/// Missing cells (short rows) stay black.
pub fn grid_bytes(rows: &[Vec<&[f32]>], height: usize, width: usize) -> Result<Vec<u8>> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return invalid("an image grid needs at least one frame");
    }
    let (gw, gh) = (cols * width, rows.len() * height);
    let mut pixels = vec![0u8; gw * gh * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, frame) in row.iter().enumerate() {
            if frame.len() != height * width * 3 {
                return invalid(format!("frame ({r}, {c}) is not {height}x{width}x3"));
            }
            for y in 0..height {
                let dst = ((r * height + y) * gw + c * width) * 3;
                for (d, &v) in pixels[dst..dst + width * 3].iter_mut().zip(&frame[y * width * 3..(y + 1) * width * 3]) {
                    *d = quantize(v);
                }
            }
        }
    }
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_grid(path: &Path, rows: &[Vec<&[f32]>], height: usize, width: usize) -> Result<()> {
    fs::write(path, grid_bytes(rows, height, width)?).map_err(io_err(path))
}

/// Parses a P6 image into `(width, height, rgb bytes)`.
pub fn read_ppm(bytes: &[u8]) -> Option<(usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos + 1..)?;
    (data.len() == w * h * 3).then_some((w, h, data))
}
