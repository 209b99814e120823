//! Routing-weight heatmap export.
//!
//! For each expert, the per-sample routing weights of a batch are rendered
//! as a binary PGM (P5, 8 bits per pixel): samples tile a near-square grid
//! in row-major order, each occupying one solid square cell whose gray
//! level is the weight mapped linearly from [0, 1] to [0, 255]. Cells past
//! the last sample stay black.

use std::fs;
use std::path::{Path, PathBuf};

use crate::block::RoutingOutcome;
use crate::error::{Error, Result};

/// Side length, in pixels, of one sample cell.
pub const CELL_PIXELS: usize = 16;

/// Columns and rows of the sample grid for a batch of `n` samples:
/// ceil(sqrt(n)) columns, then as many rows as needed.
pub fn grid_shape(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (cols, rows)
}

fn weight_to_gray(w: f64) -> Result<u8> {
    if !w.is_finite() {
        return Err(Error::NonFinite { context: "routing weight for heatmap" });
    }
    Ok((w.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Render one expert's per-sample weights as a P5 PGM byte stream.
pub fn weight_grid_pgm(weights: &[f64], cell: usize) -> Result<Vec<u8>> {
    if weights.is_empty() || cell == 0 {
        return Err(Error::InvalidConfig {
            reason: format!(
                "heatmap needs at least one sample and a positive cell size; got {} samples, cell {}",
                weights.len(),
                cell
            ),
        });
    }
    let (cols, rows) = grid_shape(weights.len());
    let width = cols * cell;
    let height = rows * cell;
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    let mut pixels = vec![0u8; width * height];
    for (i, &w) in weights.iter().enumerate() {
        let gray = weight_to_gray(w)?;
        let cy = (i / cols) * cell;
        let cx = (i % cols) * cell;
        for y in cy..cy + cell {
            pixels[y * width + cx..y * width + cx + cell].fill(gray);
        }
    }
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Write one heatmap per expert under `dir` as `expert_{i}.pgm`, using the
/// batch's final routing weights. Returns the written paths in expert order.
pub fn write_routing_heatmaps(dir: &Path, routing: &RoutingOutcome) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let n = routing.samples();
    let mut paths = Vec::with_capacity(routing.experts());
    for i in 0..routing.experts() {
        let weights: Vec<f64> = (0..n).map(|s| routing.weights_row(s)[i]).collect();
        let bytes = weight_grid_pgm(&weights, CELL_PIXELS)?;
        let path = dir.join(format!("expert_{}.pgm", i));
        fs::write(&path, bytes)?;
        paths.push(path);
    }
    Ok(paths)
}
