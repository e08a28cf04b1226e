//! Corpus directories on disk and the content-addressed spectrogram cache.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio::{compute_melspectrogram, load_wav, SpectrogramConfig};
use crate::runtime::Clip;
use crate::tts::Vocabulary;
use crate::{Error, Result};

pub const TRANSCRIPTS: &str = "transcripts.tsv";
pub const SPEAKERS: &str = "speakers.tsv";

/// Log-mel grids keyed by `sha256(config JSON ‖ WAV bytes)`.
#[derive(Debug, Clone)]
pub struct SpectrogramCache {
    dir: PathBuf,
}

impl SpectrogramCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn key(wav_bytes: &[u8], config: &SpectrogramConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config).expect("config serializes"));
        h.update(wav_bytes);
        hex::encode(h.finalize())
    }

    fn entry(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.mel"))
    }

    /// Returns the grid and whether it came from the cache.
    pub fn get_or_compute(&self, wav: &Path, config: &SpectrogramConfig) -> Result<(Array2<f64>, bool)> {
        if !wav.exists() {
            return Err(Error::MissingFile(wav.to_path_buf()));
        }
        let bytes = fs::read(wav)?;
        let path = self.entry(&Self::key(&bytes, config));
        if path.exists() {
            if let Some(grid) = decode_grid(&fs::read(&path)?) {
                return Ok((grid, true));
            }
            log::warn!("discarding unreadable cache entry {}", path.display());
        }
        let grid = compute_grid(wav, config)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, encode_grid(&grid))?;
        fs::rename(&tmp, &path)?;
        Ok((grid, false))
    }
}

fn compute_grid(wav: &Path, config: &SpectrogramConfig) -> Result<Array2<f64>> {
    let wave = load_wav(wav)?;
    if wave.sample_rate != config.sample_rate {
        return Err(Error::Config(format!(
            "{} has sample rate {} but spectrogram.sample_rate = {}",
            wav.display(),
            wave.sample_rate,
            config.sample_rate
        )));
    }
    Ok(compute_melspectrogram(&wave, config)?.values)
}

fn encode_grid(grid: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * grid.len());
    out.extend_from_slice(&(grid.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(grid.ncols() as u64).to_le_bytes());
    for v in grid.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_grid(bytes: &[u8]) -> Option<Array2<f64>> {
    let rows = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
    let cols = u64::from_le_bytes(bytes.get(8..16)?.try_into().ok()?) as usize;
    let body = bytes.get(16..)?;
    if body.len() != rows.checked_mul(cols)?.checked_mul(8)? {
        return None;
    }
    let vals = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((rows, cols), vals).ok()
}

/// Sorted WAV files directly inside `dir`.
pub fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

fn read_table(path: &Path) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected <file>\\t<value>", path.display(), n + 1)))?;
        map.insert(name.to_string(), value.to_string());
    }
    Ok(map)
}

/// A named clip loaded from a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub name: String,
    pub clip: Clip,
}

/// Statistics of a corpus load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub computed: usize,
    pub cached: usize,
}

/// Loads every WAV in `dir` as a log-mel clip. With a vocabulary every clip
/// needs a `transcripts.tsv` row; with `speakers > 0` a `speakers.tsv` row.
pub fn load_corpus(
    dir: &Path,
    config: &SpectrogramConfig,
    vocabulary: Option<&Vocabulary>,
    speakers: usize,
    cache: Option<&SpectrogramCache>,
) -> Result<(Vec<CorpusEntry>, LoadStats)> {
    let files = wav_files(dir)?;
    let transcripts = match vocabulary {
        Some(_) => Some(read_table(&dir.join(TRANSCRIPTS))?),
        None => None,
    };
    let speaker_ids = if speakers > 0 { Some(read_table(&dir.join(SPEAKERS))?) } else { None };
    let mut stats = LoadStats::default();
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let name = path.file_name().expect("file").to_string_lossy().into_owned();
        let grid = match cache {
            Some(c) => {
                let (g, hit) = c.get_or_compute(&path, config)?;
                if hit {
                    stats.cached += 1;
                } else {
                    stats.computed += 1;
                }
                g
            }
            None => {
                stats.computed += 1;
                compute_grid(&path, config)?
            }
        };
        let text = match (&transcripts, vocabulary) {
            (Some(t), Some(v)) => {
                let line = t
                    .get(&name)
                    .ok_or_else(|| Error::Config(format!("{name} has no row in {TRANSCRIPTS}")))?;
                Some(v.encode(line)?)
            }
            _ => None,
        };
        let speaker = match &speaker_ids {
            Some(s) => {
                let id: usize = s
                    .get(&name)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::Config(format!("{name} has no valid row in {SPEAKERS}")))?;
                if id >= speakers {
                    return Err(Error::Config(format!("{name}: speaker {id} but speakers = {speakers}")));
                }
                Some(id)
            }
            None => None,
        };
        out.push(CorpusEntry {
            name,
            clip: Clip { grid, text, speaker },
        });
    }
    Ok((out, stats))
}

/// Deterministic train/held-out split; at least one clip is held out when
/// `fraction > 0` and more than one clip exists.
pub fn split_holdout<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_test = (items.len() as f64 * fraction).round() as usize;
    if fraction > 0.0 && n_test == 0 && items.len() > 1 {
        n_test = 1;
    }
    let (test, train) = idx.split_at(n_test.min(items.len()));
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| items[i].clone()).collect()
    };
    (pick(train), pick(test))
}
