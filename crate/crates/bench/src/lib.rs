//! Fixtures shared by the criterion benches.

use melnet_core::corpus::synth_voiced_clip;
use melnet_core::{MelNet, NetworkConfig, SpectrogramConfig, Waveform};
use ndarray::Array2;

/// 8 kHz, hop 64, 16 mel channels.
pub fn small_spectrogram_config() -> SpectrogramConfig {
    SpectrogramConfig::new(8000, 64, 16).expect("valid config")
}

pub fn voiced_clip(seconds: f64) -> Waveform {
    synth_voiced_clip(&small_spectrogram_config(), seconds, 7)
}

/// First-tier network of the given width over `channels` mel channels.
pub fn first_tier(layers: usize, hidden: usize, channels: usize) -> MelNet {
    let config = NetworkConfig {
        layers,
        hidden,
        components: 4,
        channels,
        ..NetworkConfig::default()
    };
    MelNet::new(config, 3).expect("valid network")
}

/// Smooth deterministic grid with values in a log-mel-like range.
pub fn ramp_grid(frames: usize, channels: usize) -> Array2<f64> {
    Array2::from_shape_fn((frames, channels), |(i, j)| -4.0 + (0.3 * i as f64).sin() + 0.1 * j as f64)
}
