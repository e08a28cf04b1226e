//! Synthetic corpora: a voiced speech-like clip, piecewise-constant tone
//! sequences, the character-to-tone alignment task and a bimodal grid set
//! used by the density benchmark.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{center_frequencies, save_wav, SpectrogramConfig, Waveform};
use crate::{Error, Result};

/// Background noise added to every synthetic clip so that silent regions sit
/// above the log floor instead of exactly on it.
const DITHER: f64 = 1e-3;

fn dither(samples: &mut [f64], rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, DITHER).expect("valid std");
    for s in samples.iter_mut() {
        *s += noise.sample(rng);
    }
}

fn finish(mut samples: Vec<f64>, sample_rate: u32, peak: f64) -> Waveform {
    let m = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if m > 0.0 {
        for s in &mut samples {
            *s *= peak / m;
        }
    }
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    Waveform::new(samples, sample_rate).expect("finite synthetic samples")
}

/// A deterministic speech-like signal: a harmonic source with a gliding
/// fundamental, two moving formant resonances and a syllabic envelope.
pub fn synth_voiced_clip(config: &SpectrogramConfig, seconds: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = config.sample_rate as f64;
    let n = ((seconds * sr).round() as usize).max(1);
    let nyquist = sr / 2.0;
    let f0_base = rng.random_range(100.0..160.0);
    let glide = rng.random_range(0.5..1.5);
    let syllable_rate = rng.random_range(3.0..5.0);
    let (f1_lo, f1_hi) = (300.0f64.min(nyquist * 0.3), 800.0f64.min(nyquist * 0.45));
    let (f2_lo, f2_hi) = (900.0f64.min(nyquist * 0.5), 2200.0f64.min(nyquist * 0.85));
    let mut phase = 0.0;
    let mut samples = Vec::with_capacity(n);
    for t in 0..n {
        let time = t as f64 / sr;
        let f0 = f0_base * (1.0 + 0.25 * (2.0 * PI * glide * time).sin());
        phase += 2.0 * PI * f0 / sr;
        let f1 = f1_lo + (f1_hi - f1_lo) * (0.5 + 0.5 * (2.0 * PI * 1.3 * time).sin());
        let f2 = f2_lo + (f2_hi - f2_lo) * (0.5 + 0.5 * (2.0 * PI * 0.7 * time + 1.0).cos());
        let mut v = 0.0;
        let mut h = 1;
        while h as f64 * f0 < nyquist * 0.95 {
            let fh = h as f64 * f0;
            let gain = (-((fh - f1) / 150.0).powi(2)).exp() + 0.6 * (-((fh - f2) / 250.0).powi(2)).exp() + 0.02;
            v += gain / h as f64 * (h as f64 * phase).sin();
            h += 1;
        }
        let envelope = 0.55 + 0.45 * (2.0 * PI * syllable_rate * time).sin();
        samples.push(v * envelope);
    }
    dither(&mut samples, &mut rng);
    finish(samples, config.sample_rate, 0.5)
}

/// Sine segments with a short attack and exponential decay.
fn render_segments(segments: &[(f64, usize)], sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let attack = (0.005 * sr).max(1.0);
    let mut out = Vec::with_capacity(segments.iter().map(|s| s.1).sum());
    let mut phase = 0.0;
    for &(freq, len) in segments {
        for k in 0..len {
            let env = (k as f64 / attack).min(1.0) * (-(k as f64) / (len as f64 * 1.5)).exp();
            phase += 2.0 * PI * freq / sr;
            out.push(env * phase.sin());
        }
    }
    dither(&mut out, rng);
    out
}

/// A clip of `segments` random pitches, each held for `segment_frames` hops.
pub fn tone_clip(config: &SpectrogramConfig, segments: usize, segment_frames: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = config.f_min.max(80.0);
    let hi = config.f_max * 0.8;
    let plan: Vec<(f64, usize)> = (0..segments)
        .map(|_| {
            let f = lo * (hi / lo).powf(rng.random::<f64>());
            (f, segment_frames * config.hop)
        })
        .collect();
    let samples = render_segments(&plan, config.sample_rate, &mut rng);
    finish(samples, config.sample_rate, 0.6)
}

/// Eight-symbol alphabet for the character-to-tone task.
pub const TOY_ALPHABET: [char; 8] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];

/// Character-to-tone mapping: symbol `k` is a sine at the centre frequency
/// of mel channel `stride·k + offset`, held for `frames_per_char` hops.
#[derive(Debug, Clone, PartialEq)]
pub struct CharTone {
    pub config: SpectrogramConfig,
    pub frames_per_char: usize,
    channels: Vec<usize>,
    pitches: Vec<f64>,
}

impl CharTone {
    pub fn new(config: SpectrogramConfig, frames_per_char: usize) -> Result<Self> {
        config.validate()?;
        if frames_per_char == 0 {
            return Err(Error::InvalidArgument("frames_per_char must be positive".into()));
        }
        let m = config.mel_channels;
        if m < TOY_ALPHABET.len() {
            return Err(Error::Config(format!(
                "char-to-tone needs at least {} mel channels, got {m}",
                TOY_ALPHABET.len()
            )));
        }
        let stride = m / TOY_ALPHABET.len();
        let offset = stride / 2;
        let centers = center_frequencies(&config)?;
        let channels: Vec<usize> = (0..TOY_ALPHABET.len()).map(|k| stride * k + offset).collect();
        let pitches = channels.iter().map(|&c| centers[c]).collect();
        Ok(Self {
            config,
            frames_per_char,
            channels,
            pitches,
        })
    }

    pub fn symbol_index(&self, c: char) -> Result<usize> {
        TOY_ALPHABET
            .iter()
            .position(|&s| s == c)
            .ok_or_else(|| Error::UnknownToken(c.to_string()))
    }

    /// Mel channel assigned to symbol index `k`.
    pub fn channel(&self, k: usize) -> usize {
        self.channels[k]
    }

    pub fn pitch(&self, k: usize) -> f64 {
        self.pitches[k]
    }

    pub fn render(&self, text: &str, seed: u64) -> Result<Waveform> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = self.frames_per_char * self.config.hop;
        let plan = text
            .chars()
            .map(|c| Ok((self.pitch(self.symbol_index(c)?), len)))
            .collect::<Result<Vec<_>>>()?;
        if plan.is_empty() {
            return Err(Error::InvalidArgument("empty text".into()));
        }
        let samples = render_segments(&plan, self.config.sample_rate, &mut rng);
        Ok(finish(samples, self.config.sample_rate, 0.6))
    }

    pub fn random_text(&self, rng: &mut impl Rng, min_len: usize, max_len: usize) -> String {
        let u = rng.random_range(min_len..=max_len);
        (0..u).map(|_| TOY_ALPHABET[rng.random_range(0..TOY_ALPHABET.len())]).collect()
    }
}

/// Grids whose frames are `±a·pattern + noise`, the sign drawn once per frame.
/// Every element is bimodal given the past of its own frame only through the
/// shared sign, which a per-element mixture captures and a single Gaussian
/// cannot.
pub fn bimodal_grids(count: usize, frames: usize, channels: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let pattern: Vec<f64> = (0..channels)
        .map(|j| 1.5 + 0.5 * (2.0 * PI * j as f64 / channels as f64).cos())
        .collect();
    (0..count)
        .map(|_| {
            let mut g = Array2::zeros((frames, channels));
            for i in 0..frames {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for j in 0..channels {
                    g[[i, j]] = s * pattern[j] + noise.sample(&mut rng);
                }
            }
            g
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    Tones,
    CharToTone,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tones" => Ok(Self::Tones),
            "char-to-tone" => Ok(Self::CharToTone),
            other => Err(Error::InvalidArgument(format!("unknown corpus kind {other:?}"))),
        }
    }
}

/// Writes `size` clips to `out_dir`. The char-to-tone corpus also writes
/// `vocab.txt` and `transcripts.tsv` (file name, text).
pub fn generate_toy_corpus(
    kind: ToyKind,
    config: &SpectrogramConfig,
    size: usize,
    frames_per_char: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::with_capacity(size);
    match kind {
        ToyKind::Tones => {
            for n in 0..size {
                let clip_seed = rng.random();
                let segments = rng.random_range(3..=8);
                let path = out_dir.join(format!("tones_{n:04}.wav"));
                save_wav(&path, &tone_clip(config, segments, frames_per_char, clip_seed))?;
                written.push(path);
            }
        }
        ToyKind::CharToTone => {
            let ct = CharTone::new(config.clone(), frames_per_char)?;
            let vocab: String = TOY_ALPHABET.iter().map(|c| format!("{c}\n")).collect();
            fs::write(out_dir.join("vocab.txt"), vocab)?;
            let mut transcript = String::new();
            for n in 0..size {
                let text = ct.random_text(&mut rng, 2, 4);
                let clip_seed = rng.random();
                let name = format!("char_{n:04}.wav");
                let path = out_dir.join(&name);
                save_wav(&path, &ct.render(&text, clip_seed)?)?;
                transcript.push_str(&format!("{name}\t{text}\n"));
                written.push(path);
            }
            fs::write(out_dir.join("transcripts.tsv"), transcript)?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{compute_melspectrogram, dominant_channels};

    fn toy_config() -> SpectrogramConfig {
        SpectrogramConfig::new(8000, 64, 16).unwrap()
    }

    #[test]
    fn voiced_clip_is_deterministic_and_bounded() {
        let cfg = toy_config();
        let a = synth_voiced_clip(&cfg, 0.5, 9);
        let b = synth_voiced_clip(&cfg, 0.5, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4000);
        assert!(a.peak() <= 0.5 + 1e-12 && a.peak() > 0.4);
        assert_ne!(a, synth_voiced_clip(&cfg, 0.5, 10));
    }

    #[test]
    fn char_tone_duration_and_pitch() {
        let cfg = toy_config();
        let ct = CharTone::new(cfg.clone(), 7).unwrap();
        let text = "hadbe";
        let w = ct.render(text, 3).unwrap();
        assert_eq!(w.len(), text.len() * 7 * cfg.hop);

        let spec = compute_melspectrogram(&w, &cfg).unwrap();
        let dom = dominant_channels(&spec.values);
        for (u, c) in text.chars().enumerate() {
            let want = ct.channel(ct.symbol_index(c).unwrap());
            // Skip the boundary frames shared with the neighbours.
            for &d in &dom[u * 7 + 2..u * 7 + 6] {
                assert_eq!(d, want, "char {c}");
            }
        }
    }

    #[test]
    fn char_tone_rejects_unknown_symbol() {
        let ct = CharTone::new(toy_config(), 4).unwrap();
        assert!(matches!(ct.render("az", 0), Err(Error::UnknownToken(_))));
        assert!(ct.render("", 0).is_err());
    }

    #[test]
    fn bimodal_frames_share_sign() {
        let grids = bimodal_grids(3, 10, 6, 1);
        for g in &grids {
            for row in g.rows() {
                let pos = row.iter().filter(|&&v| v > 0.0).count();
                assert!(pos == 0 || pos == row.len());
            }
        }
        assert_eq!(grids, bimodal_grids(3, 10, 6, 1));
    }

    #[test]
    fn toy_corpus_is_reproducible() {
        let cfg = toy_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for kind in [ToyKind::Tones, ToyKind::CharToTone] {
            let pa = generate_toy_corpus(kind, &cfg, 3, 6, 42, a.path()).unwrap();
            let pb = generate_toy_corpus(kind, &cfg, 3, 6, 42, b.path()).unwrap();
            for (x, y) in pa.iter().zip(&pb) {
                assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
            }
        }
        let t = fs::read_to_string(a.path().join("transcripts.tsv")).unwrap();
        assert_eq!(t.lines().count(), 3);
    }
}
