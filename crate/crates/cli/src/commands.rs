use std::fs;
use std::path::{Path, PathBuf};

use melnet_core::audio::{
    compute_melspectrogram, invert_gradient_based, invert_griffin_lim, load_wav, save_wav, GradientInversionOptions,
    GriffinLimOptions,
};
use melnet_core::baselines::{run_density_benchmark, BenchmarkConfig, BenchmarkTable, Example, ModelKind};
use melnet_core::corpus::{bimodal_grids, generate_toy_corpus, CharTone, ToyKind};
use melnet_core::dataset::{load_corpus, split_holdout, CorpusEntry, SpectrogramCache};
use melnet_core::multiscale::multiscale_sample;
use melnet_core::network::speaker_features;
use melnet_core::plot::{save_alignment_png, save_spectrogram_png};
use melnet_core::runtime::{
    estimate_stop_threshold, evaluate_nll, frames_for_duration, slice_corpus, tier_examples, Trainer, TrainingLog,
};
use melnet_core::tts::discretized_attention_weights;
use melnet_core::{
    AttentionConfig, Conditioning, MelNet, MelSpectrogram, ModelCheckpoint, RunConfig, SampleOptions, SpectrogramConfig,
    Task, Vocabulary, Waveform,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::failure::Failure;
use crate::{Common, InvertMethod, ToyKindArg};

pub const OUTPUT_ENV: &str = "MELNET_OUTPUT";
const STOP_THRESHOLD_FILE: &str = "stop_threshold.txt";

type CmdResult = Result<(), Failure>;

struct Run {
    config: RunConfig,
    spectrogram: SpectrogramConfig,
    out: PathBuf,
}

impl Run {
    /// Resolves the configuration, applies the seed override, creates the
    /// output root and echoes the resolved settings.
    fn new(common: &Common, command: &str) -> Result<Self, Failure> {
        let mut config = match &common.config {
            Some(path) => RunConfig::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        let spectrogram = config.spectrogram.resolve()?;
        let out = std::env::var_os(OUTPUT_ENV).map_or_else(|| PathBuf::from("melnet-out"), PathBuf::from);
        fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("output root {}: {e}", out.display())))?;
        let toml = config.to_toml();
        eprintln!("# melnet {command} seed={} config={}", config.seed, config.digest());
        for line in toml.lines() {
            eprintln!("#   {line}");
        }
        fs::write(out.join(format!("{command}.resolved.toml")), &toml)?;
        Ok(Self {
            config,
            spectrogram,
            out,
        })
    }

    fn vocabulary(&self) -> Result<Option<Vocabulary>, Failure> {
        match (self.config.task, &self.config.vocabulary) {
            (Task::Tts, Some(path)) => Ok(Some(
                Vocabulary::from_file(path).map_err(|e| Failure::Config(format!("vocabulary: {e}")))?,
            )),
            _ => Ok(None),
        }
    }

    fn vocab_size(&self) -> Result<usize, Failure> {
        Ok(self.vocabulary()?.map_or(0, |v| v.len()))
    }

    fn checkpoint_path(&self, tier: usize) -> PathBuf {
        self.out.join(format!("tier{tier}.ckpt"))
    }

    fn cache(&self) -> Result<SpectrogramCache, Failure> {
        Ok(SpectrogramCache::new(self.out.join("cache"))?)
    }

    /// Loads the corpus through the cache. An unset or empty corpus is a
    /// configuration error naming the `corpus` field.
    fn corpus(&self) -> Result<Vec<CorpusEntry>, Failure> {
        let dir = &self.config.corpus;
        if dir.as_os_str().is_empty() {
            return Err(Failure::Config("corpus: not set in the run configuration".into()));
        }
        if !dir.is_dir() {
            return Err(Failure::Config(format!("corpus: {} is not a directory", dir.display())));
        }
        let vocab = self.vocabulary()?;
        let (entries, stats) = load_corpus(dir, &self.spectrogram, vocab.as_ref(), self.config.speakers, Some(&self.cache()?))?;
        if entries.is_empty() {
            return Err(Failure::Config(format!("corpus: no WAV files in {}", dir.display())));
        }
        log::info!("corpus: {} computed, {} cached", stats.computed, stats.cached);
        Ok(entries)
    }

    fn models(&self) -> Result<Vec<MelNet>, Failure> {
        let vocab = self.vocab_size()?;
        (1..=self.config.model.tiers)
            .map(|g| {
                let expected = self.config.network(g, vocab)?;
                let path = self.checkpoint_path(g);
                if !path.exists() {
                    return Err(Failure::Config(format!(
                        "tier {g} checkpoint {} not found; run `melnet train --tier {g}` first",
                        path.display()
                    )));
                }
                Ok(ModelCheckpoint::load(&path, Some(&expected))?.model)
            })
            .collect()
    }
}

fn checksum(path: &Path) -> Result<String, Failure> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn prepare(common: &Common) -> CmdResult {
    let run = Run::new(common, "prepare")?;
    let dir = &run.config.corpus;
    if dir.as_os_str().is_empty() || !dir.is_dir() {
        return Err(Failure::Config(format!("corpus: {} is not a directory", dir.display())));
    }
    let vocab = run.vocabulary()?;
    let (entries, stats) = load_corpus(dir, &run.spectrogram, vocab.as_ref(), run.config.speakers, Some(&run.cache()?))?;
    println!("prepared clips={} computed={} cached={}", entries.len(), stats.computed, stats.cached);
    Ok(())
}

pub fn train(common: &Common, tier: usize, resume: bool) -> CmdResult {
    let run = Run::new(common, "train")?;
    let cfg = &run.config;
    if tier == 0 || tier > cfg.model.tiers {
        return Err(Failure::Usage(format!("--tier {tier} outside 1..={}", cfg.model.tiers)));
    }
    let network = cfg.network(tier, run.vocab_size()?)?;
    let schedule = cfg.schedule()?;
    let entries = run.corpus()?;
    let (train_set, _) = split_holdout(&entries, cfg.holdout, cfg.seed);
    let clips: Vec<_> = train_set.into_iter().map(|e| e.clip).collect();
    let max_frames = frames_for_duration(cfg.train.max_sample_duration, &run.spectrogram);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sliced = slice_corpus(&clips, max_frames, schedule.divisors(), &mut rng)?;
    if sliced.is_empty() {
        return Err(Failure::Config(
            "train.max_sample_duration: no clip yields a crop divisible by the tier schedule".into(),
        ));
    }
    let data = tier_examples(&sliced, &schedule, tier, cfg.speakers)?;

    let path = run.checkpoint_path(tier);
    let state = if resume && path.exists() {
        let mut st = ModelCheckpoint::load(&path, Some(&network))?;
        if st.schedule != schedule || st.tier != tier {
            return Err(Failure::Config(format!("{}: schedule or tier differs from the configuration", path.display())));
        }
        st.train.steps = cfg.train.steps;
        st.train.checkpoint_every = cfg.train.checkpoint_every;
        st
    } else {
        ModelCheckpoint::initial(tier, schedule.clone(), network, cfg.train.clone(), cfg.seed.wrapping_add(tier as u64))?
    };
    let start = state.step;
    let log_path = run.out.join(format!("tier{tier}.train.tsv"));
    if start == 0 && log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut log = TrainingLog::open(&log_path)?;
    let mut trainer = Trainer::new(state);
    let records = trainer.run(&data, Some(&mut log), Some(&path))?;
    let state = trainer.into_state();
    if let Some(last) = records.last() {
        println!(
            "trained tier={tier} steps={}..{} nll={:.6} checkpoint={}",
            start,
            last.step,
            last.nll,
            path.display()
        );
    } else {
        println!("trained tier={tier} steps={start}..{start} checkpoint={}", path.display());
    }
    if tier == 1 && cfg.task == Task::Tts {
        let tau = estimate_stop_threshold(&state.model, &data)?;
        fs::write(run.out.join(STOP_THRESHOLD_FILE), format!("{tau}\n"))?;
        println!("stop_threshold={tau:.6}");
    }
    Ok(())
}

pub fn sample(
    common: &Common,
    temperature: Option<f64>,
    prime: Option<&Path>,
    text: Option<&str>,
    speaker: Option<usize>,
    name: Option<String>,
) -> CmdResult {
    let run = Run::new(common, "sample")?;
    let cfg = &run.config;
    let temperature = temperature.unwrap_or(cfg.sample.temperature);
    if !(0.0..=1.0).contains(&temperature) {
        return Err(Failure::Usage(format!("--temperature {temperature} outside [0, 1]")));
    }
    let schedule = cfg.schedule()?;
    let (dt, _) = schedule.divisors();
    let m = run.spectrogram.mel_channels;
    let models = run.models()?;

    let chars = match (cfg.task, text) {
        (Task::Tts, Some(t)) => Some(run.vocabulary()?.expect("tts has a vocabulary").encode(t)?),
        (Task::Tts, None) => return Err(Failure::Usage("--text is required for a tts configuration".into())),
        (Task::Unconditional, Some(_)) => return Err(Failure::Usage("--text needs task = \"tts\"".into())),
        (Task::Unconditional, None) => None,
    };
    let frames = match &chars {
        Some(c) => (cfg.sample.frames_per_char * c.len() as f64).ceil() as usize,
        None => frames_for_duration(cfg.sample.seconds, &run.spectrogram),
    };
    let frames = frames.div_ceil(dt).max(1) * dt;
    let stop_threshold = match &chars {
        Some(_) => Some(match cfg.sample.stop_threshold {
            Some(t) => t,
            None => {
                let path = run.out.join(STOP_THRESHOLD_FILE);
                fs::read_to_string(&path)
                    .ok()
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Failure::Config(format!("sample.stop_threshold: not set and {} missing", path.display())))?
            }
        }),
        None => None,
    };
    let tier1_shape = schedule.tier_shapes((frames, m))?[0];
    let features = match (speaker, cfg.speakers) {
        (None, 0) => None,
        (Some(_), 0) => return Err(Failure::Usage("--speaker needs speakers > 0 in the configuration".into())),
        (Some(s), n) => Some(speaker_features(s, n, tier1_shape.0, tier1_shape.1)?),
        (None, _) => return Err(Failure::Usage("--speaker is required for a multi-speaker configuration".into())),
    };
    let prime_grid = match prime {
        Some(p) => {
            let wave = load_wav(p)?;
            if wave.sample_rate != run.spectrogram.sample_rate {
                return Err(Failure::Usage(format!("--prime sample rate {} differs from the configuration", wave.sample_rate)));
            }
            Some(compute_melspectrogram(&wave, &run.spectrogram)?.values)
        }
        None => None,
    };
    let options = SampleOptions {
        temperature,
        prime: prime_grid.as_ref(),
        stop_threshold,
    };
    let first = Conditioning {
        features: features.as_ref(),
        context: None,
        text: chars.as_ref(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampled = multiscale_sample(&models, &schedule, (frames, m), &first, &options, &mut rng)?;

    let dir = run.out.join("samples");
    fs::create_dir_all(&dir)?;
    let base = name.unwrap_or_else(|| format!("sample-seed{}", cfg.seed));
    let spec = MelSpectrogram::new(sampled.grid.clone(), run.spectrogram.clone())?;
    let gl = invert_griffin_lim(
        &spec,
        &GriffinLimOptions {
            iterations: cfg.invert.griffin_lim_iterations,
            ..Default::default()
        },
    )?;
    let wav = dir.join(format!("{base}.wav"));
    save_wav(&wav, &gl.waveform)?;
    save_spectrogram_png(&sampled.grid, dir.join(format!("{base}.png")))?;
    if let Some(c) = &chars {
        let mut weights = Array2::zeros((sampled.attention.len(), c.len()));
        for (i, state) in sampled.attention.iter().enumerate() {
            weights.row_mut(i).assign(&ndarray::Array1::from(discretized_attention_weights(state, c.len())?.phi));
        }
        if !weights.is_empty() {
            save_alignment_png(&weights, dir.join(format!("{base}.alignment.png")))?;
        }
    }
    println!(
        "sampled frames={} channels={} stopped_at={} wav={} sha256={}",
        sampled.grid.nrows(),
        m,
        sampled.stopped_at.map_or("none".to_string(), |s| s.to_string()),
        wav.display(),
        checksum(&wav)?
    );
    Ok(())
}

pub fn invert(common: &Common, input: &Path, method: InvertMethod, output: Option<PathBuf>) -> CmdResult {
    let run = Run::new(common, "invert")?;
    let wave = load_wav(input)?;
    if wave.sample_rate != run.spectrogram.sample_rate {
        return Err(Failure::Config(format!(
            "spectrogram.sample_rate = {} but {} is {} Hz",
            run.spectrogram.sample_rate,
            input.display(),
            wave.sample_rate
        )));
    }
    let spec = compute_melspectrogram(&wave, &run.spectrogram)?;
    let gl_opts = GriffinLimOptions {
        iterations: run.config.invert.griffin_lim_iterations,
        ..Default::default()
    };
    let (out_wave, summary): (Waveform, String) = match method {
        InvertMethod::GriffinLim => {
            let gl = invert_griffin_lim(&spec, &gl_opts)?;
            let first = gl.errors.first().copied().unwrap_or(0.0);
            let last = gl.errors.last().copied().unwrap_or(0.0);
            (gl.waveform, format!("method=griffin-lim spectral_convergence={first:.6}->{last:.6}"))
        }
        InvertMethod::Gradient => {
            let g = invert_gradient_based(
                &spec,
                None,
                &GradientInversionOptions {
                    steps: run.config.invert.gradient_steps,
                    step_size: run.config.invert.gradient_step_size,
                    griffin_lim: gl_opts,
                },
            )?;
            let first = g.losses.first().copied().unwrap_or(0.0);
            let last = g.losses.last().copied().unwrap_or(0.0);
            (g.waveform, format!("method=gradient log_mel_mse={first:.6}->{last:.6}"))
        }
    };
    let output = output.unwrap_or_else(|| {
        let stem = input.file_stem().map_or("inverted".into(), |s| s.to_string_lossy().into_owned());
        run.out.join(format!("{stem}.inverted.wav"))
    });
    save_wav(&output, &out_wave)?;
    println!("inverted {summary} wav={}", output.display());
    Ok(())
}

pub fn nll(common: &Common) -> CmdResult {
    let run = Run::new(common, "nll")?;
    let cfg = &run.config;
    let schedule = cfg.schedule()?;
    let models = run.models()?;
    let entries = run.corpus()?;
    let (train_set, mut held) = split_holdout(&entries, cfg.holdout, cfg.seed);
    if held.is_empty() {
        log::warn!("holdout is empty; evaluating on the training clips");
        held = train_set;
    }
    let (dt, _) = schedule.divisors();
    let clips: Vec<_> = held
        .into_iter()
        .filter_map(|e| {
            let t = e.clip.grid.nrows() / dt * dt;
            (t > 0).then(|| melnet_core::Clip {
                grid: e.clip.grid.slice(ndarray::s![..t, ..]).to_owned(),
                ..e.clip
            })
        })
        .collect();
    if clips.is_empty() {
        return Err(Failure::Config("holdout: no held-out clip is long enough for the tier schedule".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    println!("tier\tnats_per_dim\telements");
    for (g, model) in models.iter().enumerate() {
        let data = tier_examples(&clips, &schedule, g + 1, cfg.speakers)?;
        let n: usize = data.iter().map(|d| d.target.len()).sum();
        let v = evaluate_nll(model, &data)?;
        println!("{}\t{v:.6}\t{n}", g + 1);
        total += v * n as f64;
        count += n;
    }
    println!("all\t{:.6}\t{count}", total / count as f64);
    Ok(())
}

pub fn bench_density(common: &Common, steps: usize, with_text: bool) -> CmdResult {
    let run = Run::new(common, "bench-density")?;
    let seed = run.config.seed;
    let mut bench = BenchmarkConfig {
        seed,
        ..Default::default()
    };
    bench.melnet_fit.steps = steps;
    bench.frame_fit.steps = steps;
    let kinds = ModelKind::ALL;

    let grids = bimodal_grids(64, 12, 8, seed);
    let (train, test) = split_holdout(&grids, 0.25, seed);
    let wrap = |v: Vec<Array2<f64>>| v.into_iter().map(|grid| Example { grid, text: None }).collect::<Vec<_>>();
    let mut table = BenchmarkTable {
        unconditional: run_density_benchmark(&wrap(train), &wrap(test), &kinds, &bench, &AttentionConfig::default(), 0)?,
        text_conditional: Vec::new(),
    };

    if with_text {
        let spec = SpectrogramConfig::new(8000, 64, 16)?;
        let ct = CharTone::new(spec.clone(), 6)?;
        let vocab = Vocabulary::new(melnet_core::corpus::TOY_ALPHABET)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..32)
            .map(|n| {
                let text = ct.random_text(&mut rng, 2, 3);
                let wave = ct.render(&text, seed + n)?;
                Ok(Example {
                    grid: compute_melspectrogram(&wave, &spec)?.values,
                    text: Some(vocab.encode(&text)?),
                })
            })
            .collect::<melnet_core::Result<Vec<_>>>()?;
        let (train, test) = split_holdout(&examples, 0.25, seed);
        let attention = AttentionConfig {
            components: 1,
            rate_init: 1.0 / 6.0,
        };
        table.text_conditional = run_density_benchmark(&train, &test, &kinds, &bench, &attention, vocab.len())?;
    }

    let dir = run.out.join("bench");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("results.tsv"), table.to_tsv())?;
    fs::write(dir.join("results.txt"), table.to_text())?;
    print!("{}", table.to_text());
    println!("results={}", dir.join("results.tsv").display());
    Ok(())
}

pub fn toydata(common: &Common, kind: ToyKindArg, size: usize, frames_per_unit: usize, out: Option<PathBuf>) -> CmdResult {
    let run = Run::new(common, "toydata")?;
    if size == 0 || frames_per_unit == 0 {
        return Err(Failure::Usage("--size and --frames-per-unit must be positive".into()));
    }
    let (kind, label) = match kind {
        ToyKindArg::Tones => (ToyKind::Tones, "tones"),
        ToyKindArg::CharToTone => (ToyKind::CharToTone, "char-to-tone"),
    };
    let dir = out.unwrap_or_else(|| run.out.join(format!("toy-{label}")));
    let files = generate_toy_corpus(kind, &run.spectrogram, size, frames_per_unit, run.config.seed, &dir)?;
    println!("toydata kind={label} clips={} dir={}", files.len(), dir.display());
    Ok(())
}
