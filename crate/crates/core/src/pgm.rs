//! Filter visualization: rows of a weight matrix tiled into a grayscale grid
//! and written as binary PGM (P5).
//!
//! Conventions: each filter is min-max normalized on its own to `[0, 255]`;
//! a constant filter maps to mid-gray 128. Tiles are laid out row-major on a
//! `ceil(√n)`-column grid, separated by 1-pixel lines; separators and unused
//! cells are black.

use crate::error::{LrrnError, Result};
use crate::linalg::Matrix;

pub const CONSTANT_FILTER_GRAY: u8 = 128;
pub const BACKGROUND: u8 = 0;
pub const SEPARATOR: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// `(grid_rows, grid_cols)` for `n` tiles.
pub fn grid_layout(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (rows, cols)
}

/// Square tile shape for a filter of length `len`, if `len` is a perfect square.
pub fn square_shape(len: usize) -> Option<(usize, usize)> {
    let side = (len as f64).sqrt().round() as usize;
    (side * side == len).then_some((side, side))
}

fn normalize(filter: &[f64]) -> Vec<u8> {
    let lo = filter.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = filter.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![CONSTANT_FILTER_GRAY; filter.len()];
    }
    filter.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Tiles every row of `w` (reshaped to `shape`, or a square if omitted).
pub fn filter_grid(w: &Matrix, shape: Option<(usize, usize)>) -> Result<GrayImage> {
    let (th, tw) = match shape {
        Some(s) => s,
        None => square_shape(w.cols()).ok_or_else(|| {
            LrrnError::Pgm(format!("filter length {} is not a perfect square; pass an explicit shape", w.cols()))
        })?,
    };
    if th * tw != w.cols() {
        return Err(LrrnError::Pgm(format!("shape {th}x{tw} does not match filter length {}", w.cols())));
    }
    let n = w.rows();
    let (grid_rows, grid_cols) = grid_layout(n);
    let width = (grid_cols * tw + grid_cols.saturating_sub(1) * SEPARATOR).max(1);
    let height = (grid_rows * th + grid_rows.saturating_sub(1) * SEPARATOR).max(1);
    let mut pixels = vec![BACKGROUND; width * height];
    for f in 0..n {
        let tile = normalize(w.row(f));
        let (gr, gc) = (f / grid_cols, f % grid_cols);
        let (y0, x0) = (gr * (th + SEPARATOR), gc * (tw + SEPARATOR));
        for r in 0..th {
            let dst = (y0 + r) * width + x0;
            pixels[dst..dst + tw].copy_from_slice(&tile[r * tw..(r + 1) * tw]);
        }
    }
    Ok(GrayImage { width, height, pixels })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}
