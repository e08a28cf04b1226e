use ndarray::Array2;

use super::SpectrogramConfig;
use crate::{Error, Result};

/// `2595·log10(1 + f/700)`.
pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative frequency {f}")));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `mel_channels` triangular filters. The
/// `mel_channels + 2` band edges are equally spaced on the mel axis.
pub fn filter_edges_hz(config: &SpectrogramConfig) -> Result<Vec<f64>> {
    let lo = hz_to_mel(config.f_min)?;
    let hi = hz_to_mel(config.f_max)?;
    let n = config.mel_channels + 2;
    Ok((0..n)
        .map(|k| mel_to_hz(lo + (hi - lo) * k as f64 / (n - 1) as f64))
        .collect())
}

pub fn center_frequencies(config: &SpectrogramConfig) -> Result<Vec<f64>> {
    let edges = filter_edges_hz(config)?;
    Ok(edges[1..edges.len() - 1].to_vec())
}

/// `[mel_channels × (fft_size/2 + 1)]` triangular filterbank with unit peaks.
pub fn build_mel_filterbank(config: &SpectrogramConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let edges = filter_edges_hz(config)?;
    let bins = config.fft_bins();
    let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
    let mut fb = Array2::zeros((config.mel_channels, bins));
    for m in 0..config.mel_channels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            fb[[m, k]] = up.min(down).max(0.0);
        }
        if fb.row(m).iter().all(|&w| w <= 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({:.1} Hz) covers no fft bin; reduce mel_channels or raise fft_size",
                center
            )));
        }
    }
    Ok(fb)
}
