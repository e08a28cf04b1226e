//! Per-tier training, sampling, corpus slicing and checkpoint files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{frame_count, SpectrogramConfig};
use crate::multiscale::{decompose, AxisSchedule};
use crate::network::{speaker_features, Conditioning, MelNet, NetworkConfig, SampleOptions, Sampled};
use crate::params::{Gradients, RmsProp};
use crate::tts::{estimate_tau, CharSequence};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Longest training crop in seconds.
    pub max_sample_duration: f64,
    pub steps: usize,
    pub grad_clip_norm: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 1,
            max_sample_duration: 6.0,
            steps: 1000,
            grad_clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.max_sample_duration > 0.0) {
            return bad("train.max_sample_duration must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("train.grad_clip_norm must be positive");
        }
        Ok(())
    }
}

/// A full-resolution training grid with optional transcript and speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub grid: Array2<f64>,
    pub text: Option<CharSequence>,
    pub speaker: Option<usize>,
}

impl Clip {
    pub fn new(grid: Array2<f64>) -> Self {
        Self {
            grid,
            text: None,
            speaker: None,
        }
    }
}

/// Frames spanned by `seconds` of audio at the given STFT settings.
pub fn frames_for_duration(seconds: f64, config: &SpectrogramConfig) -> usize {
    frame_count((seconds * config.sample_rate as f64).round() as usize, config.hop)
}

/// Random contiguous crops of at most `max_frames`, with lengths rounded
/// down to multiples of `divisors`. Transcribed clips are never cut (the
/// transcript covers the whole clip); ones that are too long are skipped.
pub fn slice_corpus(clips: &[Clip], max_frames: usize, divisors: (usize, usize), rng: &mut impl Rng) -> Result<Vec<Clip>> {
    if max_frames == 0 {
        return Err(Error::InvalidArgument("max_frames must be positive".into()));
    }
    let (dt, dm) = divisors;
    let mut out = Vec::with_capacity(clips.len());
    for (n, clip) in clips.iter().enumerate() {
        let (t, m) = clip.grid.dim();
        if m % dm != 0 {
            return Err(Error::Config(format!("{m} mel channels not divisible by {dm} required by the tier schedule")));
        }
        let len = (t.min(max_frames) / dt) * dt;
        if len == 0 {
            log::warn!("clip {n}: {t} frames is shorter than one divisible unit of {dt}; skipped");
            continue;
        }
        if clip.text.is_some() {
            if t > max_frames {
                log::warn!("clip {n}: transcribed clip of {t} frames exceeds {max_frames}; skipped");
                continue;
            }
            out.push(Clip {
                grid: clip.grid.slice(s![..len, ..]).to_owned(),
                ..clip.clone()
            });
            continue;
        }
        let start = rng.random_range(0..=t - len);
        out.push(Clip {
            grid: clip.grid.slice(s![start..start + len, ..]).to_owned(),
            ..clip.clone()
        });
    }
    Ok(out)
}

/// Target grid for one tier plus everything it is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct TierExample {
    pub target: Array2<f64>,
    pub context: Option<Array2<f64>>,
    pub text: Option<CharSequence>,
    pub features: Option<Array2<f64>>,
}

impl TierExample {
    pub fn conditioning(&self) -> Conditioning<'_> {
        Conditioning {
            features: self.features.as_ref(),
            context: self.context.as_ref(),
            text: self.text.as_ref(),
        }
    }
}

/// Decomposes each clip and keeps tier `g`. Text and speaker conditioning
/// apply to tier 1 only; finer tiers see the lower-tier context instead.
pub fn tier_examples(clips: &[Clip], schedule: &AxisSchedule, g: usize, speakers: usize) -> Result<Vec<TierExample>> {
    if g == 0 || g > schedule.tiers() {
        return Err(Error::InvalidArgument(format!("tier {g} outside 1..={}", schedule.tiers())));
    }
    clips
        .iter()
        .map(|clip| {
            let tiers = decompose(&clip.grid, schedule)?;
            let target = tiers.tier(g).clone();
            if g > 1 {
                return Ok(TierExample {
                    context: Some(tiers.context(g)?),
                    target,
                    text: None,
                    features: None,
                });
            }
            let features = match (clip.speaker, speakers) {
                (_, 0) => None,
                (Some(s), n) => Some(speaker_features(s, n, target.nrows(), target.ncols())?),
                (None, _) => return Err(Error::InvalidArgument("clip has no speaker but the model expects one".into())),
            };
            Ok(TierExample {
                target,
                context: None,
                text: clip.text.clone(),
                features,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    /// Minibatch mean training NLL in nats/dim.
    pub nll: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Seconds since the trainer was created.
    pub wall_time: f64,
}

/// Append-only tab-separated training log.
pub struct TrainingLog {
    out: BufWriter<File>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "step\tnll\tgrad_norm\twall_time";

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut out = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        if fresh {
            writeln!(out, "{}", Self::HEADER)?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}\t{:.6}\t{:.6}\t{:.3}", r.step, r.nll, r.grad_norm, r.wall_time)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Everything needed to resume training of one tier exactly.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    /// 1-based tier index.
    pub tier: usize,
    pub schedule: AxisSchedule,
    pub train: TrainConfig,
    pub step: u64,
    pub model: MelNet,
    pub optimizer: RmsProp,
    pub rng: ChaCha8Rng,
}

const MAGIC: &[u8; 8] = b"MELNETCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    tier: usize,
    schedule: AxisSchedule,
    train: TrainConfig,
    network: NetworkConfig,
    step: u64,
    layout: Vec<(String, usize, usize)>,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
}

impl ModelCheckpoint {
    /// Fresh state at step 0.
    pub fn initial(tier: usize, schedule: AxisSchedule, network: NetworkConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        train.validate()?;
        if tier == 0 || tier > schedule.tiers() {
            return Err(Error::Config(format!("tier {tier} outside 1..={}", schedule.tiers())));
        }
        if tier > 1 && network.feature_layers == 0 {
            return Err(Error::Config(format!("tier {tier} needs network.feature_layers > 0")));
        }
        let model = MelNet::new(network, seed)?;
        let optimizer = RmsProp::new(model.params(), train.learning_rate, train.momentum);
        let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Ok(Self {
            tier,
            schedule,
            train,
            step: 0,
            model,
            optimizer,
            rng,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let network = self.model.config().clone();
        let meta = Metadata {
            tier: self.tier,
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            network: network.clone(),
            step: self.step,
            layout: self.model.params().layout(),
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&network.digest());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let opt = &self.optimizer;
        for v in [opt.learning_rate, opt.momentum, opt.decay, opt.epsilon] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for group in [self.model.params().values(), &opt.mean_square, &opt.velocity] {
            for a in group {
                for v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let sum = Sha256::digest(&buf);
        buf.extend_from_slice(&sum);
        Ok(buf)
    }

    /// Parses a checkpoint. When `expected` is given its digest must match
    /// the stored network configuration.
    pub fn from_bytes(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        if bytes.len() < MAGIC.len() + 4 + 32 + 8 + 32 {
            return Err(corrupt("file too short".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch".into()));
        }
        if &body[..8] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if let Some(cfg) = expected {
            if cfg.digest() != digest {
                return Err(Error::CheckpointMismatch("network configuration differs from the checkpoint".into()));
            }
        }
        let json_len = r.u64()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(json_len)?).map_err(|e| corrupt(format!("metadata: {e}")))?;
        if meta.network.digest() != digest {
            return Err(corrupt("metadata does not match the stored config digest".into()));
        }
        let mut model = MelNet::new(meta.network, 0)?;
        if model.params().layout() != meta.layout {
            return Err(Error::CheckpointMismatch("parameter layout differs from this build".into()));
        }
        let hyper = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let read_group = |r: &mut Reader| -> Result<Vec<Array2<f64>>> {
            meta.layout
                .iter()
                .map(|(_, rows, cols)| {
                    let vals = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Ok(Array2::from_shape_vec((*rows, *cols), vals).expect("layout shape"))
                })
                .collect()
        };
        let params = read_group(&mut r)?;
        let mean_square = read_group(&mut r)?;
        let velocity = read_group(&mut r)?;
        if r.pos != body.len() {
            return Err(corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        model.params_mut().load_values(params)?;
        let optimizer = RmsProp {
            learning_rate: hyper[0],
            momentum: hyper[1],
            decay: hyper[2],
            epsilon: hyper[3],
            mean_square,
            velocity,
        };
        let seed: [u8; 32] = hex::decode(&meta.rng_seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| corrupt("rng seed".into()))?;
        let word_pos: u128 = meta.rng_word_pos.parse().map_err(|_| corrupt("rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            tier: meta.tier,
            schedule: meta.schedule,
            train: meta.train,
            step: meta.step,
            model,
            optimizer,
            rng,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&NetworkConfig>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, expected)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Teacher-forced RMSProp training of one tier.
pub struct Trainer {
    state: ModelCheckpoint,
    started: Instant,
}

impl Trainer {
    pub fn new(state: ModelCheckpoint) -> Self {
        Self {
            state,
            started: Instant::now(),
        }
    }

    pub fn state(&self) -> &ModelCheckpoint {
        &self.state
    }

    pub fn into_state(self) -> ModelCheckpoint {
        self.state
    }

    /// One minibatch update. On a non-finite loss or gradient the
    /// parameters are left untouched and an error is returned.
    pub fn step(&mut self, data: &[TierExample]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("no training examples for this tier".into()));
        }
        let st = &mut self.state;
        let batch = st.train.batch_size;
        let mut grads = Gradients::zeros_like(st.model.params());
        let mut loss = 0.0;
        for _ in 0..batch {
            let ex = &data[st.rng.random_range(0..data.len())];
            let (l, g) = st.model.nll_and_grad(&ex.target, &ex.conditioning())?;
            loss += l;
            grads.add_assign(&g);
        }
        loss /= batch as f64;
        grads.scale(1.0 / batch as f64);
        let next = st.step + 1;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("training step {next}")));
        }
        let grad_norm = grads.clip_norm(st.train.grad_clip_norm);
        st.optimizer.step(st.model.params_mut(), &grads);
        st.step = next;
        Ok(StepRecord {
            step: next,
            nll: loss,
            grad_norm,
            wall_time: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Runs until `train.steps` total steps. Logs every step and writes the
    /// checkpoint at the configured interval and at the end. On failure the
    /// last good state is saved before the error is returned.
    pub fn run(&mut self, data: &[TierExample], mut log: Option<&mut TrainingLog>, checkpoint: Option<&Path>) -> Result<Vec<StepRecord>> {
        let total = self.state.train.steps as u64;
        let every = self.state.train.checkpoint_every as u64;
        let mut records = Vec::new();
        while self.state.step < total {
            let rec = match self.step(data) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(path) = checkpoint {
                        self.state.save(path)?;
                    }
                    return Err(e);
                }
            };
            if let Some(log) = log.as_deref_mut() {
                log.write(&rec)?;
            }
            log::debug!("step {} nll {:.4} |g| {:.4}", rec.step, rec.nll, rec.grad_norm);
            records.push(rec);
            if let Some(path) = checkpoint {
                if every > 0 && rec.step % every == 0 && rec.step < total {
                    self.state.save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.state.save(path)?;
        }
        Ok(records)
    }
}

/// Trains tier `g` from scratch on full-resolution clips.
pub fn train_tier(
    tier: usize,
    clips: &[Clip],
    schedule: &AxisSchedule,
    network: &NetworkConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<ModelCheckpoint> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset("training corpus is empty".into()));
    }
    let data = tier_examples(clips, schedule, tier, network.conditioning_dim)?;
    let state = ModelCheckpoint::initial(tier, schedule.clone(), network.clone(), train.clone(), seed)?;
    let mut trainer = Trainer::new(state);
    trainer.run(&data, None, None)?;
    Ok(trainer.into_state())
}

/// Mean teacher-forced NLL over a dataset, weighted by element count.
pub fn evaluate_nll(model: &MelNet, data: &[TierExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no evaluation examples".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in data {
        total += model.nll(&ex.target, &ex.conditioning())? * ex.target.len() as f64;
        count += ex.target.len();
    }
    Ok(total / count as f64)
}

/// Ancestral sampling of a single tier with a shape check.
pub fn sample_tier(
    model: &MelNet,
    cond: &Conditioning,
    shape: (usize, usize),
    options: &SampleOptions,
    rng: &mut impl Rng,
) -> Result<Sampled> {
    if shape.1 != model.config().channels {
        return Err(Error::shape(
            format!("{} channels", model.config().channels),
            format!("{} channels", shape.1),
        ));
    }
    model.sample(shape.0, cond, options, rng)
}

/// Stop threshold as the mean terminal survival over transcribed examples.
pub fn estimate_stop_threshold(model: &MelNet, data: &[TierExample]) -> Result<f64> {
    let survivals = data
        .iter()
        .filter(|ex| ex.text.is_some())
        .map(|ex| model.terminal_survival(&ex.target, &ex.conditioning()))
        .collect::<Result<Vec<_>>>()?;
    estimate_tau(&survivals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiscale::default_schedule;

    fn tiny(channels: usize) -> NetworkConfig {
        NetworkConfig {
            layers: 1,
            hidden: 4,
            components: 2,
            channels,
            ..Default::default()
        }
    }

    fn data(n: usize, frames: usize, channels: usize, seed: u64) -> Vec<TierExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| TierExample {
                target: Array2::from_shape_fn((frames, channels), |_| rng.random_range(-1.0..1.0)),
                context: None,
                text: None,
                features: None,
            })
            .collect()
    }

    fn one_tier() -> AxisSchedule {
        AxisSchedule::new(vec![])
    }

    fn train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            steps,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_follow_the_optimizer_settings() {
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate, 1e-4);
        assert_eq!(t.momentum, 0.9);
        assert_eq!(t.grad_clip_norm, 1.0);
        t.validate().unwrap();
        assert!(TrainConfig { batch_size: 0, ..t }.validate().is_err());
    }

    #[test]
    fn slicing_respects_duration_and_divisibility() {
        let cfg = SpectrogramConfig::new(8000, 80, 8).unwrap();
        let ten = frames_for_duration(10.0, &cfg);
        let clip = Clip::new(Array2::zeros((ten, 8)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = slice_corpus(&[clip], frames_for_duration(10.0, &cfg), (1, 1), &mut rng).unwrap();
        assert_eq!(out[0].grid.nrows(), ten);

        let three = frames_for_duration(3.0, &cfg);
        let clip = Clip::new(Array2::zeros((three, 8)));
        let out = slice_corpus(&[clip], frames_for_duration(6.0, &cfg), (4, 2), &mut rng).unwrap();
        assert_eq!(out[0].grid.nrows(), three / 4 * 4);

        let mut clips: Vec<Clip> = (0..30)
            .map(|_| Clip::new(Array2::zeros((rng.random_range(1..200), 8))))
            .collect();
        clips.push(Clip::new(Array2::zeros((7, 8))));
        let out = slice_corpus(&clips, 64, (8, 4), &mut rng).unwrap();
        assert!(out.len() < clips.len(), "clips under 8 frames are dropped");
        for c in &out {
            assert!(c.grid.nrows() <= 64 && c.grid.nrows() % 8 == 0 && c.grid.ncols() % 4 == 0);
        }
        assert!(slice_corpus(&clips, 64, (1, 3), &mut rng).is_err());
    }

    #[test]
    fn crops_are_contiguous_windows() {
        let grid = Array2::from_shape_fn((50, 2), |(i, j)| (i * 2 + j) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = slice_corpus(&[Clip::new(grid.clone())], 16, (1, 1), &mut rng).unwrap();
        let start = out[0].grid[[0, 0]] as usize / 2;
        assert_eq!(out[0].grid, grid.slice(s![start..start + 16, ..]));
    }

    #[test]
    fn tier_examples_carry_context() {
        let full = (16, 8);
        let schedule = default_schedule(3, full).unwrap();
        let grid = Array2::from_shape_fn(full, |(i, j)| (i * 8 + j) as f64);
        let ex = tier_examples(&[Clip::new(grid.clone())], &schedule, 3, 0).unwrap();
        let tiers = decompose(&grid, &schedule).unwrap();
        assert_eq!(&ex[0].target, tiers.tier(3));
        assert_eq!(ex[0].context.as_ref().unwrap(), &tiers.context(3).unwrap());
        let first = tier_examples(&[Clip::new(grid)], &schedule, 1, 0).unwrap();
        assert!(first[0].context.is_none());
    }

    #[test]
    fn first_step_is_finite_across_seeds() {
        let d = data(2, 5, 4, 9);
        for seed in 0..5 {
            let state = ModelCheckpoint::initial(1, one_tier(), tiny(4), train_cfg(1), seed).unwrap();
            let rec = Trainer::new(state).step(&d).unwrap();
            assert!(rec.nll.is_finite() && rec.grad_norm.is_finite());
        }
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let clips = vec![Clip::new(Array2::zeros((4, 4)))];
        let ck = train_tier(1, &clips, &one_tier(), &tiny(4), &train_cfg(0), 5).unwrap();
        let init = MelNet::new(tiny(4), 5).unwrap();
        assert_eq!(ck.model.params().values(), init.params().values());
        assert_eq!(ck.step, 0);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = train_tier(1, &[], &one_tier(), &tiny(4), &train_cfg(1), 0).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let d = data(2, 4, 4, 1);
        let mut trainer = Trainer::new(ModelCheckpoint::initial(1, one_tier(), tiny(4), train_cfg(3), 2).unwrap());
        trainer.run(&d, None, None).unwrap();
        let st = trainer.into_state();
        let bytes = st.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes, Some(&tiny(4))).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let cond = Conditioning::default();
        let a = st.model.forward(&d[0].target, &cond).unwrap().raw;
        let b = back.model.forward(&d[0].target, &cond).unwrap().raw;
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mismatched_config_and_corruption_fail_loudly() {
        let st = ModelCheckpoint::initial(1, one_tier(), tiny(4), train_cfg(0), 0).unwrap();
        let mut bytes = st.to_bytes().unwrap();
        let other = NetworkConfig { hidden: 5, ..tiny(4) };
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes, Some(&other)),
            Err(Error::CheckpointMismatch(_))
        ));
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes, None), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes[..20], None),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let d = data(3, 4, 4, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tier1.ckpt");

        let mut straight = Trainer::new(ModelCheckpoint::initial(1, one_tier(), tiny(4), train_cfg(6), 7).unwrap());
        let full = straight.run(&d, None, None).unwrap();

        let mut first = Trainer::new(ModelCheckpoint::initial(1, one_tier(), tiny(4), train_cfg(3), 7).unwrap());
        first.run(&d, None, Some(&path)).unwrap();
        let mut resumed = ModelCheckpoint::load(&path, Some(&tiny(4))).unwrap();
        resumed.train.steps = 6;
        let mut second = Trainer::new(resumed);
        let tail = second.run(&d, None, None).unwrap();

        for (a, b) in full[3..].iter().zip(&tail) {
            assert_eq!((a.step, a.nll.to_bits()), (b.step, b.nll.to_bits()));
        }
        assert_eq!(straight.state().model.params().values(), second.state().model.params().values());
    }

    #[test]
    fn infinite_clip_matches_no_clipping() {
        let d = data(2, 4, 4, 2);
        let mut a = Trainer::new(ModelCheckpoint::initial(1, one_tier(), tiny(4), train_cfg(3), 1).unwrap());
        let cfg = TrainConfig {
            grad_clip_norm: f64::INFINITY,
            ..train_cfg(3)
        };
        let mut b = Trainer::new(ModelCheckpoint::initial(1, one_tier(), tiny(4), cfg, 1).unwrap());
        a.state.train.grad_clip_norm = 1e12;
        a.run(&d, None, None).unwrap();
        b.run(&d, None, None).unwrap();
        assert_eq!(a.state().model.params().values(), b.state().model.params().values());
    }

    #[test]
    fn non_finite_loss_halts_and_keeps_last_good_state() {
        let mut d = data(1, 4, 4, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        let mut t = Trainer::new(ModelCheckpoint::initial(1, one_tier(), tiny(4), train_cfg(2), 0).unwrap());
        t.run(&d, None, None).unwrap();
        let before = t.state().model.params().values().to_vec();
        t.state.train.steps = 4;
        d[0].target[[1, 1]] = f64::NAN;
        assert!(matches!(t.run(&d, None, Some(&path)), Err(Error::NonFinite(_))));
        assert_eq!(t.state().model.params().values(), &before[..]);
        assert_eq!(ModelCheckpoint::load(&path, None).unwrap().step, 2);
    }

    #[test]
    fn training_log_is_appended() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        let d = data(1, 3, 4, 0);
        for steps in [2, 4] {
            let mut log = TrainingLog::open(&path).unwrap();
            let mut t = Trainer::new(ModelCheckpoint::initial(1, one_tier(), tiny(4), train_cfg(steps), 0).unwrap());
            if steps == 4 {
                t.state.step = 2;
            }
            t.run(&d, Some(&mut log), None).unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TrainingLog::HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("4\t"));
    }

    #[test]
    fn sampling_shape_and_prime() {
        let net = MelNet::new(tiny(4), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = SampleOptions::default();
        let s = sample_tier(&net, &Conditioning::default(), (5, 4), &opts, &mut rng).unwrap();
        assert_eq!(s.grid.dim(), (5, 4));
        let prime = Array2::from_elem((5, 4), 0.25);
        let opts = SampleOptions {
            prime: Some(&prime),
            ..opts
        };
        let s = sample_tier(&net, &Conditioning::default(), (5, 4), &opts, &mut rng).unwrap();
        assert_eq!(s.grid, prime);
        assert!(sample_tier(&net, &Conditioning::default(), (6, 4), &opts, &mut rng).is_ok());
        assert!(sample_tier(&net, &Conditioning::default(), (4, 4), &opts, &mut rng).is_err());
        assert!(sample_tier(&net, &Conditioning::default(), (5, 3), &SampleOptions::default(), &mut rng).is_err());
    }
}
