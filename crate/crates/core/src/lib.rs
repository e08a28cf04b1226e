//! Fine-grained autoregressive modelling of mel spectrograms.

pub mod audio;
pub mod baselines;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod density;
mod error;
pub mod multiscale;
pub mod network;
pub mod nn;
pub mod params;
pub mod plot;
pub mod runtime;
pub mod tape;
pub mod tts;

pub use audio::{MelSpectrogram, SpectrogramConfig, Waveform};
pub use config::{RunConfig, Task};
pub use error::{Error, Result};
pub use multiscale::{Axis, AxisSchedule};
pub use network::{Conditioning, MelNet, NetworkConfig, SampleOptions};
pub use runtime::{Clip, ModelCheckpoint, TrainConfig};
pub use tts::{AttentionConfig, CharSequence, Vocabulary};
