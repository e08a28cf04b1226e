//! Run configuration: one TOML file with one section per concern.
//!
//! ```toml
//! seed = 7
//! task = "tts"
//! corpus = "data/char-to-tone"
//! vocabulary = "data/char-to-tone/vocab.txt"
//!
//! [spectrogram]
//! sample_rate = 8000
//! hop = 64
//!
//! [model]
//! tiers = 3
//! initial_layers = 4
//! upsampling_layers = [3, 2]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramConfig;
use crate::multiscale::{Axis, AxisSchedule};
use crate::network::NetworkConfig;
use crate::runtime::TrainConfig;
use crate::tts::AttentionConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Unconditional,
    Tts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramSection {
    pub sample_rate: u32,
    pub hop: usize,
    /// Defaults to six hops.
    pub window: Option<usize>,
    /// Defaults to the next power of two at or above the window.
    pub fft_size: Option<usize>,
    pub mel_channels: usize,
    pub f_min: f64,
    /// Defaults to the Nyquist frequency.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for SpectrogramSection {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            hop: 64,
            window: None,
            fft_size: None,
            mel_channels: 32,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-5,
        }
    }
}

impl SpectrogramSection {
    pub fn resolve(&self) -> Result<SpectrogramConfig> {
        let window = self.window.unwrap_or(6 * self.hop);
        let cfg = SpectrogramConfig {
            sample_rate: self.sample_rate,
            hop: self.hop,
            window,
            fft_size: self.fft_size.unwrap_or(window.next_power_of_two()),
            mel_channels: self.mel_channels,
            f_min: self.f_min,
            f_max: self.f_max.unwrap_or(self.sample_rate as f64 / 2.0),
            log_floor: self.log_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub tiers: usize,
    pub initial_layers: usize,
    /// Layer counts for tiers 2..=G.
    pub upsampling_layers: Vec<usize>,
    /// Feature-extractor layers in each upsampling tier.
    pub feature_layers: usize,
    pub hidden: usize,
    pub components: usize,
    pub attention_components: usize,
    /// Initial attention advance in characters per frame.
    pub attention_rate: f64,
    /// Split axes for tiers 2..=G; alternating from the top when absent.
    pub axes: Option<Vec<Axis>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            tiers: 3,
            initial_layers: 3,
            upsampling_layers: vec![2, 2],
            feature_layers: 1,
            hidden: 16,
            components: 10,
            attention_components: 10,
            attention_rate: 1.0,
            axes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub seconds: f64,
    pub temperature: f64,
    /// Attention stop threshold for TTS; estimated from data when absent.
    pub stop_threshold: Option<f64>,
    /// Frame budget relative to the transcript length for TTS sampling.
    pub frames_per_char: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            seconds: 2.0,
            temperature: 1.0,
            stop_threshold: None,
            frames_per_char: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSection {
    pub griffin_lim_iterations: usize,
    pub gradient_steps: usize,
    pub gradient_step_size: f64,
}

impl Default for InvertSection {
    fn default() -> Self {
        Self {
            griffin_lim_iterations: 50,
            gradient_steps: 200,
            gradient_step_size: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    /// Directory of WAV files (plus `transcripts.tsv` / `speakers.tsv`).
    pub corpus: PathBuf,
    /// One character per line; required for `task = "tts"`.
    pub vocabulary: Option<PathBuf>,
    /// Number of speaker ids the initial tier is conditioned on (0 = none).
    pub speakers: usize,
    /// Fraction of clips held out for evaluation.
    pub holdout: f64,
    pub spectrogram: SpectrogramSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub invert: InvertSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Unconditional,
            corpus: PathBuf::new(),
            vocabulary: None,
            speakers: 0,
            holdout: 0.1,
            spectrogram: SpectrogramSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sample: SampleSection::default(),
            invert: InvertSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let spec = self.spectrogram.resolve()?;
        self.train.validate()?;
        let m = &self.model;
        if m.tiers == 0 {
            return bad("model.tiers must be at least 1".into());
        }
        if m.upsampling_layers.len() != m.tiers - 1 {
            return bad(format!(
                "model.upsampling_layers has {} entries but model.tiers = {} needs {}",
                m.upsampling_layers.len(),
                m.tiers,
                m.tiers - 1
            ));
        }
        if let Some(axes) = &m.axes {
            if axes.len() != m.tiers - 1 {
                return bad(format!("model.axes needs {} entries", m.tiers - 1));
            }
        }
        if m.tiers > 1 && m.feature_layers == 0 {
            return bad("model.feature_layers must be positive with more than one tier".into());
        }
        if !(m.attention_rate > 0.0) {
            return bad("model.attention_rate must be positive".into());
        }
        let (_, dm) = self.schedule()?.divisors();
        if spec.mel_channels % dm != 0 {
            return bad(format!(
                "spectrogram.mel_channels = {} is not divisible by {dm} as the tier schedule requires",
                spec.mel_channels
            ));
        }
        if self.task == Task::Tts && self.vocabulary.is_none() {
            return bad("vocabulary is required when task = \"tts\"".into());
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.sample.temperature) {
            return bad("sample.temperature must lie in [0, 1]".into());
        }
        if !(self.sample.seconds > 0.0) {
            return bad("sample.seconds must be positive".into());
        }
        // Every tier network must be constructible.
        for g in 1..=m.tiers {
            self.network(g, usize::from(self.task == Task::Tts))?.validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<AxisSchedule> {
        match &self.model.axes {
            Some(axes) => Ok(AxisSchedule::new(axes.clone())),
            None => AxisSchedule::alternating(self.model.tiers),
        }
    }

    /// Network for tier `g`. Only tier 1 has the centralized stack, text
    /// and speaker conditioning; the others have a feature extractor.
    pub fn network(&self, g: usize, vocab_size: usize) -> Result<NetworkConfig> {
        let m = &self.model;
        if g == 0 || g > m.tiers {
            return Err(Error::Config(format!("tier {g} outside 1..={}", m.tiers)));
        }
        let schedule = self.schedule()?;
        let (dt, dm) = schedule.divisors();
        let channels = if self.spectrogram.mel_channels % dm == 0 {
            schedule.tier_shapes((dt, self.spectrogram.mel_channels))?[g - 1].1
        } else {
            return Err(Error::Config("spectrogram.mel_channels is not divisible by the schedule".into()));
        };
        let first = g == 1;
        Ok(NetworkConfig {
            layers: if first { m.initial_layers } else { m.upsampling_layers[g - 2] },
            hidden: m.hidden,
            components: m.components,
            channels,
            centralized: first,
            conditioning_dim: if first { self.speakers } else { 0 },
            feature_layers: if first { 0 } else { m.feature_layers },
            vocab_size: if first && self.task == Task::Tts { vocab_size } else { 0 },
            attention: AttentionConfig {
                components: m.attention_components,
                rate_init: m.attention_rate,
            },
        })
    }

    /// SHA-256 of the canonical serialized config.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
