//! Waveform ⇄ log-mel spectrogram conversion and spectrogram inversion.

mod invert;
mod mel;
mod stft;
mod wav;

pub use invert::{
    invert_gradient_based, invert_griffin_lim, unmel, GradientInversion, GradientInversionOptions,
    GriffinLim, GriffinLimOptions,
};
pub use mel::{build_mel_filterbank, center_frequencies, hz_to_mel, mel_to_hz};
pub use stft::{frame_count, Stft};
pub use wav::{load_wav, save_wav};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// STFT and mel settings. `window` defaults to six hops and `fft_size` to the
/// next power of two at or above the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub window: usize,
    pub fft_size: usize,
    pub mel_channels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl SpectrogramConfig {
    pub fn new(sample_rate: u32, hop: usize, mel_channels: usize) -> Result<Self> {
        let window = 6 * hop;
        let cfg = Self {
            sample_rate,
            hop,
            window,
            fft_size: window.next_power_of_two(),
            mel_channels,
            f_min: 0.0,
            f_max: sample_rate as f64 / 2.0,
            log_floor: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.sample_rate == 0 {
            return bad("spectrogram.sample_rate must be positive".into());
        }
        if self.hop == 0 || self.window == 0 {
            return bad("spectrogram.hop and spectrogram.window must be positive".into());
        }
        if self.fft_size < self.window || !self.fft_size.is_power_of_two() {
            return bad(format!(
                "spectrogram.fft_size {} must be a power of two >= window {}",
                self.fft_size, self.window
            ));
        }
        if self.hop > self.window {
            return bad("spectrogram.hop must not exceed spectrogram.window".into());
        }
        if self.mel_channels == 0 {
            return bad("spectrogram.mel_channels must be >= 1".into());
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= f_min < f_max <= sample_rate/2, got f_min={} f_max={}",
                self.f_min, self.f_max
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("spectrogram.log_floor must be positive".into());
        }
        Ok(())
    }

    pub fn fft_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn log_floor_ln(&self) -> f64 {
        self.log_floor.ln()
    }
}

/// Time-major `[T × M]` grid of natural-log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub config: SpectrogramConfig,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f64>, config: SpectrogramConfig) -> Result<Self> {
        if values.ncols() != config.mel_channels {
            return Err(Error::shape(
                format!("{} mel channels", config.mel_channels),
                format!("{} columns", values.ncols()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel spectrogram".into()));
        }
        Ok(Self { values, config })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Power spectrogram → mel → `ln(max(·, ε))`.
pub fn compute_melspectrogram(y: &Waveform, config: &SpectrogramConfig) -> Result<MelSpectrogram> {
    config.validate()?;
    if y.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if y.sample_rate != config.sample_rate {
        return Err(Error::Config(format!(
            "waveform sample rate {} does not match spectrogram.sample_rate {}",
            y.sample_rate, config.sample_rate
        )));
    }
    let fb = build_mel_filterbank(config)?;
    let stft = Stft::new(config);
    let power = stft.power(&y.samples);
    Ok(MelSpectrogram {
        values: log_mel_from_power(&power, &fb, config.log_floor),
        config: config.clone(),
    })
}

pub(crate) fn log_mel_from_power(power: &Array2<f64>, fb: &Array2<f64>, floor: f64) -> Array2<f64> {
    power.dot(&fb.t()).mapv(|v| v.max(floor).ln())
}

/// Index of the largest mel channel in each frame.
pub fn dominant_channels(spec: &Array2<f64>) -> Vec<usize> {
    spec.rows()
        .into_iter()
        .map(|row| {
            (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0)
        })
        .collect()
}

/// Mel channel whose center frequency is closest to `hz`.
pub fn nearest_channel(config: &SpectrogramConfig, hz: f64) -> Result<usize> {
    let centers = center_frequencies(config)?;
    Ok((0..centers.len())
        .min_by(|&a, &b| (centers[a] - hz).abs().total_cmp(&(centers[b] - hz).abs()))
        .unwrap_or(0))
}
