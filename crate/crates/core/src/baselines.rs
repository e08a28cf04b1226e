//! Comparison models and the density benchmark: a frame-level diagonal
//! Gaussian decoder, VAEs with a global or per-frame latent, and the
//! single-Gaussian variant of the fine-grained network.

use std::fmt::Write as _;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::network::{Conditioning, MelNet, NetworkConfig};
use crate::nn::{sequence_steps, CentralizedLayer, Ctx, Linear, Lstm};
use crate::params::{Gradients, ParamStore, RmsProp};
use crate::tape::Var;
use crate::tts::{AttentionCarry, AttentionCell, AttentionConfig, CharSequence, TextEncoder};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameModelConfig {
    /// Frame dimension `d`.
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Vocabulary size for text conditioning (0 = none).
    pub vocab_size: usize,
    pub attention: AttentionConfig,
}

#[derive(Debug, Clone)]
enum FrameLayer {
    Plain(CentralizedLayer),
    Attention(AttentionCell),
}

/// Autoregressive residual LSTM over frames emitting a diagonal Gaussian
/// per frame. Optional per-frame latent input enters at the input layer.
#[derive(Debug, Clone)]
pub struct FrameDecoder {
    config: FrameModelConfig,
    input: Linear,
    latent: Option<Linear>,
    text: Option<TextEncoder>,
    layers: Vec<FrameLayer>,
    head: Linear,
}

impl FrameDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: FrameModelConfig, latent_dim: usize) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 || config.layers == 0 {
            return Err(Error::Config("frame decoder dimensions must be positive".into()));
        }
        let h = config.hidden;
        let input = Linear::new(store, rng, "decoder.input", config.dim, h, false);
        let latent = (latent_dim > 0).then(|| Linear::new(store, rng, "decoder.latent", latent_dim, h, false));
        let text = (config.vocab_size > 0).then(|| TextEncoder::new(store, rng, "decoder.text", config.vocab_size, h));
        let attention_layer = (config.vocab_size > 0).then(|| (config.layers / 2).max(1));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            layers.push(if attention_layer == Some(l) {
                FrameLayer::Attention(AttentionCell::new(store, rng, &format!("decoder.attention{l}"), h, &config.attention)?)
            } else {
                FrameLayer::Plain(CentralizedLayer::new(store, rng, &format!("decoder.layer{l}"), h))
            });
        }
        let head = Linear::new(store, rng, "decoder.head", h, 2 * config.dim, true);
        Ok(Self {
            config,
            input,
            latent,
            text,
            layers,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// `(μ, ln σ)`, each `[T × d]`, for every frame given the previous ones.
    /// `latent` is `[1 × Z]` (broadcast) or `[T × Z]`.
    pub fn build(&self, cx: &mut Ctx, x: &Array2<f64>, latent: Option<Var>, text: Option<&CharSequence>) -> Result<(Var, Var)> {
        let (t, d) = x.dim();
        if d != self.config.dim {
            return Err(Error::shape(format!("{} per frame", self.config.dim), format!("{d} per frame")));
        }
        if t == 0 {
            return Err(Error::InvalidArgument("no frames".into()));
        }
        let mut shifted = Array2::zeros((t, d));
        shifted.slice_mut(s![1.., ..]).assign(&x.slice(s![..t - 1, ..]));
        let xv = cx.constant(shifted);
        let mut h = self.input.apply(cx, xv);
        if let (Some(z), Some(proj)) = (latent, &self.latent) {
            let z = if cx.shape(z).0 == 1 { cx.broadcast_rows(z, t) } else { z };
            let p = proj.apply(cx, z);
            h = cx.add(h, p);
        }
        let feats = match (text, &self.text) {
            (Some(chars), Some(enc)) => Some(enc.encode(cx, chars)?),
            (None, None) => None,
            (Some(_), None) => return Err(Error::InvalidArgument("decoder takes no text".into())),
            (None, Some(_)) => return Err(Error::InvalidArgument("decoder needs text".into())),
        };
        for layer in &self.layers {
            h = match layer {
                FrameLayer::Plain(l) => l.forward(cx, h),
                FrameLayer::Attention(cell) => {
                    let f = feats.expect("text features");
                    let mut carry: AttentionCarry = cell.initial(cx);
                    let mut outs = Vec::with_capacity(t);
                    for i in 0..t {
                        let y = cx.gather_rows(h, vec![i]);
                        let (o, next, _, _) = cell.step(cx, y, carry, f);
                        outs.push(o);
                        carry = next;
                    }
                    cx.concat_rows(&outs)
                }
            };
        }
        let out = self.head.apply(cx, h);
        let mu = cx.slice_cols(out, 0, d);
        let ls = cx.slice_cols(out, d, d);
        Ok((mu, ls))
    }
}

/// Per-element diagonal-Gaussian NLL in nats/dim.
pub fn diagonal_gaussian_nll(x: &Array2<f64>, mu: &Array2<f64>, sigma: &Array2<f64>) -> Result<f64> {
    if x.dim() != mu.dim() || x.dim() != sigma.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?} / {:?}", mu.dim(), sigma.dim())));
    }
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument("σ must be positive".into()));
    }
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let total: f64 = ndarray::Zip::from(x)
        .and(mu)
        .and(sigma)
        .fold(0.0, |acc, &x, &m, &s| acc + half_ln_2pi + s.ln() + 0.5 * ((x - m) / s).powi(2));
    Ok(total / x.len() as f64)
}

/// Diagonal Gaussian `KL(N(μ, σ²) ‖ N(0, 1))` summed over elements.
pub fn kl_to_standard_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
        .sum()
}

/// Objective and score interface shared by every benchmarked model.
pub trait DensityModel {
    fn name(&self) -> &str;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Whether scores are upper bounds on the NLL.
    fn is_bound(&self) -> bool {
        false
    }
    /// Training objective in nats/dim and its gradient.
    fn objective(&self, x: &Array2<f64>, text: Option<&CharSequence>, kl_weight: f64, rng: &mut ChaCha8Rng) -> Result<(f64, Gradients)>;
    /// Evaluation score in nats/dim: exact NLL, or the negated ELBO for latent models.
    fn score(&self, x: &Array2<f64>, text: Option<&CharSequence>, rng: &mut ChaCha8Rng) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct FramewiseGaussian {
    store: ParamStore,
    decoder: FrameDecoder,
}

impl FramewiseGaussian {
    pub fn new(config: FrameModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let decoder = FrameDecoder::new(&mut store, &mut rng, config, 0)?;
        Ok(Self { store, decoder })
    }

    /// Per-frame `(μ, σ)` under teacher forcing.
    pub fn frame_params(&self, x: &Array2<f64>, text: Option<&CharSequence>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut cx = Ctx::new(&self.store);
        let (mu, ls) = self.decoder.build(&mut cx, x, None, text)?;
        Ok((cx.value(mu).clone(), cx.value(ls).mapv(|v| v.max(crate::tape::MIN_LOG_SIGMA).exp())))
    }

    /// Exact NLL in nats/dim.
    pub fn nll(&self, x: &Array2<f64>, text: Option<&CharSequence>) -> Result<f64> {
        let (mu, sigma) = self.frame_params(x, text)?;
        diagonal_gaussian_nll(x, &mu, &sigma)
    }
}

impl DensityModel for FramewiseGaussian {
    fn name(&self) -> &str {
        "framewise diagonal Gaussian"
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn objective(&self, x: &Array2<f64>, text: Option<&CharSequence>, _: f64, _: &mut ChaCha8Rng) -> Result<(f64, Gradients)> {
        let mut cx = Ctx::new(&self.store);
        let (mu, ls) = self.decoder.build(&mut cx, x, None, text)?;
        let total = cx.gauss_nll(mu, ls, x.clone());
        let loss = cx.scale(total, 1.0 / x.len() as f64);
        cx.backward(loss);
        Ok((cx.scalar(loss), cx.gradients(&self.store)))
    }

    fn score(&self, x: &Array2<f64>, text: Option<&CharSequence>, _: &mut ChaCha8Rng) -> Result<f64> {
        self.nll(x, text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    /// One latent vector per utterance.
    Global,
    /// One latent vector per frame.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub kind: LatentKind,
    pub dim: usize,
}

/// Bidirectional residual recurrent encoder producing a diagonal Gaussian
/// posterior.
#[derive(Debug, Clone)]
struct Encoder {
    spec: LatentSpec,
    input: Linear,
    layers: Vec<(Lstm, Lstm, Linear)>,
    out: Linear,
}

impl Encoder {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, hidden: usize, layers: usize, spec: LatentSpec) -> Self {
        let input = Linear::new(store, rng, "encoder.input", dim, hidden, false);
        let layers = (1..=layers)
            .map(|l| {
                (
                    Lstm::new(store, rng, &format!("encoder.layer{l}.fwd"), hidden, hidden),
                    Lstm::new(store, rng, &format!("encoder.layer{l}.bwd"), hidden, hidden),
                    Linear::new(store, rng, &format!("encoder.layer{l}.proj"), 2 * hidden, hidden, false),
                )
            })
            .collect();
        let out = Linear::new(store, rng, "encoder.out", hidden, 2 * spec.dim, true);
        Self { spec, input, layers, out }
    }

    /// `(μ, ln σ)`, `[1 × Z]` for a global latent or `[T × Z]` for a local one.
    fn encode(&self, cx: &mut Ctx, x: &Array2<f64>) -> (Var, Var) {
        let t = x.nrows();
        let xv = cx.constant(x.clone());
        let mut h = self.input.apply(cx, xv);
        for (fwd, bwd, proj) in &self.layers {
            let gf = fwd.input_gates(cx, h);
            let (hf, _) = fwd.scan(cx, gf, &sequence_steps(t, false), None);
            let gb = bwd.input_gates(cx, h);
            let (hb, _) = bwd.scan(cx, gb, &sequence_steps(t, true), None);
            let cat = cx.concat_cols(&[hf, hb]);
            let p = proj.apply(cx, cat);
            h = cx.add(p, h);
        }
        if self.spec.kind == LatentKind::Global {
            let pool = cx.constant(Array2::from_elem((1, t), 1.0 / t as f64));
            h = cx.matmul(pool, h);
        }
        let o = self.out.apply(cx, h);
        let z = self.spec.dim;
        (cx.slice_cols(o, 0, z), cx.slice_cols(o, z, z))
    }
}

/// Per-element ELBO terms (nats/dim).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// `E_q[ln p(x | z)]` estimated with one sample.
    pub reconstruction: f64,
    pub kl: f64,
    /// `reconstruction − kl_weight · kl`.
    pub elbo: f64,
}

#[derive(Debug, Clone)]
pub struct Vae {
    name: String,
    store: ParamStore,
    encoder: Encoder,
    decoder: FrameDecoder,
}

impl Vae {
    pub fn new(config: FrameModelConfig, spec: LatentSpec, encoder_layers: usize, seed: u64) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, config.dim, config.hidden, encoder_layers, spec);
        let decoder = FrameDecoder::new(&mut store, &mut rng, config, spec.dim)?;
        let name = match spec.kind {
            LatentKind::Global => "VAE (global latent)",
            LatentKind::Local => "VAE (local latents)",
        };
        Ok(Self {
            name: name.into(),
            store,
            encoder,
            decoder,
        })
    }

    pub fn spec(&self) -> LatentSpec {
        self.encoder.spec
    }

    /// Zeroes the latent input map so the decoder ignores `z`.
    pub fn detach_latent(&mut self) {
        if let Some(l) = &self.decoder.latent {
            self.store.get_mut(l.weight).fill(0.0);
        }
    }

    fn build(
        &self,
        cx: &mut Ctx,
        x: &Array2<f64>,
        text: Option<&CharSequence>,
        kl_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var, Var)> {
        if !(0.0..=1.0).contains(&kl_weight) {
            return Err(Error::InvalidArgument(format!("kl_weight {kl_weight} outside [0, 1]")));
        }
        let (mu, ls) = self.encoder.encode(cx, x);
        let shape = cx.shape(mu);
        let eps = cx.constant(Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal)));
        let sigma = cx.exp(ls);
        let noise = cx.mul(sigma, eps);
        let z = cx.add(mu, noise);
        let (dmu, dls) = self.decoder.build(cx, x, Some(z), text)?;
        let rec = cx.gauss_nll(dmu, dls, x.clone());
        let kl = cx.kl_std_normal(mu, ls);
        if !cx.scalar(kl).is_finite() {
            return Err(Error::NonFinite("KL term".into()));
        }
        let weighted = cx.scale(kl, kl_weight);
        let neg = cx.add(rec, weighted);
        let n = x.len() as f64;
        Ok((cx.scale(neg, 1.0 / n), rec, kl))
    }

    pub fn elbo(&self, x: &Array2<f64>, text: Option<&CharSequence>, kl_weight: f64, rng: &mut ChaCha8Rng) -> Result<ElboTerms> {
        let mut cx = Ctx::new(&self.store);
        let (_, rec, kl) = self.build(&mut cx, x, text, kl_weight, rng)?;
        let n = x.len() as f64;
        let reconstruction = -cx.scalar(rec) / n;
        let kl = cx.scalar(kl) / n;
        Ok(ElboTerms {
            reconstruction,
            kl,
            elbo: reconstruction - kl_weight * kl,
        })
    }
}

impl DensityModel for Vae {
    fn name(&self) -> &str {
        &self.name
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn is_bound(&self) -> bool {
        true
    }

    fn objective(&self, x: &Array2<f64>, text: Option<&CharSequence>, kl_weight: f64, rng: &mut ChaCha8Rng) -> Result<(f64, Gradients)> {
        let mut cx = Ctx::new(&self.store);
        let (loss, _, _) = self.build(&mut cx, x, text, kl_weight, rng)?;
        cx.backward(loss);
        Ok((cx.scalar(loss), cx.gradients(&self.store)))
    }

    fn score(&self, x: &Array2<f64>, text: Option<&CharSequence>, rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(-self.elbo(x, text, 1.0, rng)?.elbo)
    }
}

/// The fine-grained network under a benchmark label.
#[derive(Debug, Clone)]
pub struct MelNetModel {
    name: String,
    net: MelNet,
}

impl MelNetModel {
    pub fn new(name: impl Into<String>, net: MelNet) -> Self {
        Self { name: name.into(), net }
    }

    pub fn network(&self) -> &MelNet {
        &self.net
    }
}

impl DensityModel for MelNetModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn params(&self) -> &ParamStore {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.net.params_mut()
    }

    fn objective(&self, x: &Array2<f64>, text: Option<&CharSequence>, _: f64, _: &mut ChaCha8Rng) -> Result<(f64, Gradients)> {
        self.net.nll_and_grad(x, &Conditioning { text, ..Default::default() })
    }

    fn score(&self, x: &Array2<f64>, text: Option<&CharSequence>, _: &mut ChaCha8Rng) -> Result<f64> {
        self.net.nll(x, &Conditioning { text, ..Default::default() })
    }
}

/// KL weight rising linearly to 1 over the first epoch.
pub fn kl_anneal_weight(step: usize, steps_per_epoch: usize) -> f64 {
    if steps_per_epoch == 0 {
        return 1.0;
    }
    ((step + 1) as f64 / steps_per_epoch as f64).min(1.0)
}

/// A grid with optional transcript.
#[derive(Debug, Clone)]
pub struct Example {
    pub grid: Array2<f64>,
    pub text: Option<CharSequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

/// Minibatch RMSProp on the model objective. Returns per-step losses.
pub fn fit(model: &mut dyn DensityModel, data: &[Example], config: &FitConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = RmsProp::new(model.params(), config.learning_rate, config.momentum);
    let steps_per_epoch = data.len().div_ceil(config.batch_size.max(1));
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let kl_weight = kl_anneal_weight(step, steps_per_epoch);
        let mut grads = Gradients::zeros_like(model.params());
        let mut loss = 0.0;
        let b = config.batch_size.max(1);
        for _ in 0..b {
            let ex = &data[rng.random_range(0..data.len())];
            let (l, g) = model.objective(&ex.grid, ex.text.as_ref(), kl_weight, &mut rng)?;
            loss += l;
            grads.add_assign(&g);
        }
        grads.scale(1.0 / b as f64);
        loss /= b as f64;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("{} objective at step {step}", model.name())));
        }
        grads.clip_norm(config.grad_clip_norm);
        opt.step(model.params_mut(), &grads);
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean score over `data` in nats/dim.
pub fn evaluate(model: &dyn DensityModel, data: &[Example], seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no evaluation examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in data {
        total += model.score(&ex.grid, ex.text.as_ref(), &mut rng)? * ex.grid.len() as f64;
        count += ex.grid.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MelNetGmm,
    MelNetGaussian,
    Framewise,
    VaeGlobal,
    VaeLocal,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::MelNetGmm,
        ModelKind::MelNetGaussian,
        ModelKind::Framewise,
        ModelKind::VaeGlobal,
        ModelKind::VaeLocal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::MelNetGmm => "MelNet: GMM",
            ModelKind::MelNetGaussian => "MelNet: Gaussian",
            ModelKind::Framewise => "Diagonal Gaussian",
            ModelKind::VaeGlobal => "VAE: global z",
            ModelKind::VaeLocal => "VAE: local z",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub melnet_layers: usize,
    pub melnet_hidden: usize,
    pub components: usize,
    pub frame_hidden: usize,
    pub frame_layers: usize,
    pub encoder_layers: usize,
    pub global_latent: usize,
    pub local_latent: usize,
    pub melnet_fit: FitConfig,
    pub frame_fit: FitConfig,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let fit = FitConfig {
            steps: 600,
            batch_size: 2,
            learning_rate: 3e-3,
            momentum: 0.9,
            grad_clip_norm: 1.0,
            seed: 0,
        };
        Self {
            melnet_layers: 1,
            melnet_hidden: 12,
            components: 4,
            frame_hidden: 32,
            frame_layers: 2,
            encoder_layers: 1,
            global_latent: 16,
            local_latent: 4,
            melnet_fit: fit.clone(),
            frame_fit: fit,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub kind: ModelKind,
    pub parameters: usize,
    /// Held-out nats/dim (an upper bound when `bound` is set).
    pub test: f64,
    pub train: f64,
    pub bound: bool,
}

pub fn build_model(
    kind: ModelKind,
    cfg: &BenchmarkConfig,
    channels: usize,
    vocab_size: usize,
    attention: &AttentionConfig,
) -> Result<Box<dyn DensityModel>> {
    let frame = FrameModelConfig {
        dim: channels,
        hidden: cfg.frame_hidden,
        layers: cfg.frame_layers,
        vocab_size,
        attention: attention.clone(),
    };
    let melnet = |k: usize| NetworkConfig {
        layers: cfg.melnet_layers,
        hidden: cfg.melnet_hidden,
        components: k,
        channels,
        centralized: true,
        conditioning_dim: 0,
        feature_layers: 0,
        vocab_size,
        attention: attention.clone(),
    };
    Ok(match kind {
        ModelKind::MelNetGmm => Box::new(MelNetModel::new(kind.label(), MelNet::new(melnet(cfg.components), cfg.seed)?)),
        ModelKind::MelNetGaussian => Box::new(MelNetModel::new(kind.label(), MelNet::new(melnet(1), cfg.seed)?)),
        ModelKind::Framewise => Box::new(FramewiseGaussian::new(frame, cfg.seed)?),
        ModelKind::VaeGlobal => Box::new(Vae::new(
            frame,
            LatentSpec {
                kind: LatentKind::Global,
                dim: cfg.global_latent,
            },
            cfg.encoder_layers,
            cfg.seed,
        )?),
        ModelKind::VaeLocal => Box::new(Vae::new(
            frame,
            LatentSpec {
                kind: LatentKind::Local,
                dim: cfg.local_latent,
            },
            cfg.encoder_layers,
            cfg.seed,
        )?),
    })
}

/// Trains each model on `train` and scores it on `train` and `test`.
pub fn run_density_benchmark(
    train: &[Example],
    test: &[Example],
    kinds: &[ModelKind],
    cfg: &BenchmarkConfig,
    attention: &AttentionConfig,
    vocab_size: usize,
) -> Result<Vec<BenchmarkEntry>> {
    let channels = train
        .first()
        .ok_or_else(|| Error::EmptyDataset("benchmark training split".into()))?
        .grid
        .ncols();
    if test.is_empty() {
        return Err(Error::EmptyDataset("benchmark test split".into()));
    }
    if let Some(bad) = train.iter().chain(test).find(|e| e.grid.ncols() != channels) {
        return Err(Error::shape(format!("{channels} channels"), format!("{} channels", bad.grid.ncols())));
    }
    let mut out = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut model = build_model(kind, cfg, channels, vocab_size, attention)?;
        let fit_cfg = match kind {
            ModelKind::MelNetGmm | ModelKind::MelNetGaussian => &cfg.melnet_fit,
            _ => &cfg.frame_fit,
        };
        fit(model.as_mut(), train, fit_cfg)?;
        let test_score = evaluate(model.as_ref(), test, cfg.seed ^ 0x5eed)?;
        let train_score = evaluate(model.as_ref(), train, cfg.seed ^ 0x5eed)?;
        if !test_score.is_finite() || !train_score.is_finite() {
            return Err(Error::NonFinite(format!("{} benchmark score", kind.label())));
        }
        log::info!("{}: test {test_score:.4} nats/dim", kind.label());
        out.push(BenchmarkEntry {
            kind,
            parameters: model.params().count(),
            test: test_score,
            train: train_score,
            bound: model.is_bound(),
        });
    }
    Ok(out)
}

/// Results laid out as model × {unconditional, text-conditional}.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub unconditional: Vec<BenchmarkEntry>,
    pub text_conditional: Vec<BenchmarkEntry>,
}

impl BenchmarkTable {
    fn kinds(&self) -> Vec<ModelKind> {
        let mut kinds: Vec<ModelKind> = Vec::new();
        for e in self.unconditional.iter().chain(&self.text_conditional) {
            if !kinds.contains(&e.kind) {
                kinds.push(e.kind);
            }
        }
        kinds
    }

    fn cell(entries: &[BenchmarkEntry], kind: ModelKind) -> Option<&BenchmarkEntry> {
        entries.iter().find(|e| e.kind == kind)
    }

    /// Tab-separated: model, task, bound flag, test, train, parameter count.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("model\ttask\tbound\ttest_nats_per_dim\ttrain_nats_per_dim\tparameters\n");
        for (task, entries) in [("unconditional", &self.unconditional), ("text", &self.text_conditional)] {
            for e in entries {
                let _ = writeln!(
                    s,
                    "{}\t{task}\t{}\t{:.6}\t{:.6}\t{}",
                    e.kind.label(),
                    e.bound,
                    e.test,
                    e.train,
                    e.parameters
                );
            }
        }
        s
    }

    /// Aligned text table; bounds are prefixed with `≤`.
    pub fn to_text(&self) -> String {
        let fmt = |e: Option<&BenchmarkEntry>| match e {
            Some(e) if e.bound => format!("≤ {:.3}", e.test),
            Some(e) => format!("{:.3}", e.test),
            None => "n/a".into(),
        };
        let rows: Vec<(String, String, String)> = self
            .kinds()
            .into_iter()
            .map(|k| {
                (
                    k.label().to_string(),
                    fmt(Self::cell(&self.unconditional, k)),
                    fmt(Self::cell(&self.text_conditional, k)),
                )
            })
            .collect();
        let headers = ("Model", "Unconditional", "Text-conditional");
        let w0 = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0).max(headers.0.len());
        let w1 = rows.iter().map(|r| r.1.chars().count()).max().unwrap_or(0).max(headers.1.len());
        let w2 = rows.iter().map(|r| r.2.chars().count()).max().unwrap_or(0).max(headers.2.len());
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
        let mut out = format!("{}  {}  {}\n", pad(headers.0, w0), pad(headers.1, w1), pad(headers.2, w2));
        out.push_str(&format!("{}  {}  {}\n", "-".repeat(w0), "-".repeat(w1), "-".repeat(w2)));
        for (a, b, c) in rows {
            out.push_str(&format!("{}  {}  {}\n", pad(&a, w0), pad(&b, w1), pad(&c, w2)));
        }
        out
    }
}
