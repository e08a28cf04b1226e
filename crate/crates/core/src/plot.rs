//! Spectrogram and alignment images.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::{Error, Result};

/// Piecewise-linear approximation of a perceptually uniform dark-to-bright map.
const STOPS: [(f64, [f64; 3]); 5] = [
    (0.00, [0.267, 0.005, 0.329]),
    (0.25, [0.229, 0.322, 0.546]),
    (0.50, [0.128, 0.567, 0.551]),
    (0.75, [0.369, 0.789, 0.383]),
    (1.00, [0.993, 0.906, 0.144]),
];

fn colour(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let k = STOPS.windows(2).position(|w| v <= w[1].0).unwrap_or(STOPS.len() - 2);
    let ((a, ca), (b, cb)) = (STOPS[k], STOPS[k + 1]);
    let t = (v - a) / (b - a);
    let px = |i: usize| ((ca[i] + t * (cb[i] - ca[i])) * 255.0).round() as u8;
    Rgb([px(0), px(1), px(2)])
}

/// Renders a time-major `[T × M]` grid with time left to right and low
/// frequencies at the bottom. Each cell becomes a `scale × scale` block.
pub fn render_grid(grid: &Array2<f64>, scale: u32) -> Result<RgbImage> {
    let (t, m) = grid.dim();
    if t == 0 || m == 0 {
        return Err(Error::InvalidArgument("cannot plot an empty grid".into()));
    }
    let finite = grid.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return Err(Error::NonFinite("plotted grid".into()));
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    let s = scale.max(1);
    let mut img = RgbImage::new(t as u32 * s, m as u32 * s);
    for ((i, j), &v) in grid.indexed_iter() {
        let c = colour((v - lo) / range);
        let y0 = (m - 1 - j) as u32 * s;
        for dy in 0..s {
            for dx in 0..s {
                img.put_pixel(i as u32 * s + dx, y0 + dy, c);
            }
        }
    }
    Ok(img)
}

pub fn save_spectrogram_png(grid: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let scale = if grid.nrows() < 200 { 4 } else { 1 };
    render_grid(grid, scale)?.save(path)?;
    Ok(())
}

/// Attention weights `[frames × characters]`, characters bottom to top.
pub fn save_alignment_png(weights: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    render_grid(weights, 8)?.save(path)?;
    Ok(())
}
