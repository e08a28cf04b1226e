use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::Waveform;
use crate::{Error, Result};

/// Reads a 16-bit PCM WAV file. Samples are scaled by 1/32768 and
/// multi-channel audio is averaged down to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::FormatError(msg) => Error::UnsupportedEncoding(msg.to_string()),
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported wav feature".into()),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{:?} {}-bit (only 16-bit PCM is supported)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    let raw: Vec<i16> = reader.samples::<i16>().collect::<std::result::Result<_, _>>()?;
    if raw.is_empty() || channels == 0 {
        return Err(Error::EmptyAudio);
    }
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / frame.len() as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM, clamping to the representable range.
pub fn save_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
