//! The fine-grained autoregressive network: time-delayed, frequency-delayed
//! and centralized stacks, conditioning at the input layer, the mixture
//! head, and an incremental sampler that carries recurrent state frame by
//! frame.

use ndarray::{s, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::density::{constrain_params, sample_unchecked, Gmm, GmmParamGrid, RawParamGrid};
use crate::nn::{
    CentralizedLayer, Ctx, Direction, FeatureExtractor, FrequencyDelayedLayer, Geometry, Linear, LstmState, MdRnnLayer,
};
use crate::params::{uniform_init, Gradients, ParamId, ParamStore};
use crate::tape::{Var, MIN_LOG_SIGMA};
use crate::tts::{AttentionCarry, AttentionCell, AttentionConfig, AttentionState, CharSequence, TextEncoder};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Mixture components per element.
    pub components: usize,
    /// Channels of the modelled grid; fixes the centralized input map.
    pub channels: usize,
    pub centralized: bool,
    /// Width of external per-element conditioning features (0 = none).
    pub conditioning_dim: usize,
    /// Layers of the feature extractor over lower tiers (0 = first tier).
    pub feature_layers: usize,
    /// Vocabulary size for text conditioning (0 = no text).
    pub vocab_size: usize,
    pub attention: AttentionConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 16,
            components: 10,
            channels: 16,
            centralized: true,
            conditioning_dim: 0,
            feature_layers: 0,
            vocab_size: 0,
            attention: AttentionConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("components", self.components),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("network.{name} must be positive")));
            }
        }
        if self.vocab_size > 0 && !self.centralized {
            return Err(Error::Config("text conditioning needs network.centralized = true".into()));
        }
        Ok(())
    }

    /// 1-based layer index holding the attention cell, if any.
    pub fn attention_layer(&self) -> Option<usize> {
        (self.vocab_size > 0).then(|| (self.layers / 2).max(1))
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Everything a network may be conditioned on besides `x` itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    /// Per-element features `[T·M × D]`, rows in time-major order.
    pub features: Option<&'a Array2<f64>>,
    /// Interleaved lower tiers `[T × M]` for an upsampling tier.
    pub context: Option<&'a Array2<f64>>,
    pub text: Option<&'a CharSequence>,
}

/// One-hot speaker features broadcast over a `[frames × channels]` grid.
pub fn speaker_features(speaker: usize, speakers: usize, frames: usize, channels: usize) -> Result<Array2<f64>> {
    if speaker >= speakers {
        return Err(Error::InvalidArgument(format!("speaker {speaker} out of range 0..{speakers}")));
    }
    let mut z = Array2::zeros((frames * channels, speakers));
    z.column_mut(speaker).fill(1.0);
    Ok(z)
}

#[derive(Debug, Clone)]
enum Central {
    Plain(CentralizedLayer),
    Attention(AttentionCell),
}

#[derive(Debug, Clone)]
struct Upsampling {
    extractor: FeatureExtractor,
    to_time: ParamId,
    to_freq: ParamId,
}

/// Output of a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Unconstrained mixture parameters `[T·M × 3K]`.
    pub raw: Array2<f64>,
    /// Attention parameters per frame (text-conditioned networks only).
    pub attention: Vec<AttentionState>,
}

/// Result of autoregressive sampling.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub grid: Array2<f64>,
    pub attention: Vec<AttentionState>,
    /// Set when the stop rule ended generation; the grid then has this many frames.
    pub stopped_at: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions<'a> {
    pub temperature: f64,
    /// Leading frames clamped to these values.
    pub prime: Option<&'a Array2<f64>>,
    /// Stop threshold on the attention survival (text networks only).
    pub stop_threshold: Option<f64>,
}

impl Default for SampleOptions<'_> {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            prime: None,
            stop_threshold: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MelNet {
    config: NetworkConfig,
    store: ParamStore,
    input_time: ParamId,
    input_freq: ParamId,
    input_central: Option<ParamId>,
    cond: Option<(ParamId, ParamId)>,
    upsampling: Option<Upsampling>,
    text: Option<TextEncoder>,
    time_layers: Vec<MdRnnLayer>,
    freq_layers: Vec<FrequencyDelayedLayer>,
    central_layers: Vec<Central>,
    head: Linear,
}

const TIME_DELAYED: [Direction; 3] = [Direction::FreqForward, Direction::FreqBackward, Direction::TimeForward];

impl MelNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let h = config.hidden;
        let mut store = ParamStore::new();
        let input_time = store.add("input.time", uniform_init(rng, 1, h));
        let input_freq = store.add("input.freq", uniform_init(rng, 1, h));
        let input_central = config
            .centralized
            .then(|| store.add("input.central", uniform_init(rng, config.channels, h)));
        let cond = (config.conditioning_dim > 0).then(|| {
            (
                store.add("cond.time", uniform_init(rng, config.conditioning_dim, h)),
                store.add("cond.freq", uniform_init(rng, config.conditioning_dim, h)),
            )
        });
        let upsampling = (config.feature_layers > 0).then(|| Upsampling {
            extractor: FeatureExtractor::new(&mut store, rng, "features", h, config.feature_layers),
            to_time: store.add("features.time", uniform_init(rng, h, h)),
            to_freq: store.add("features.freq", uniform_init(rng, h, h)),
        });
        let text = (config.vocab_size > 0).then(|| TextEncoder::new(&mut store, rng, "text", config.vocab_size, h));
        let attention_layer = config.attention_layer();
        let mut time_layers = Vec::new();
        let mut freq_layers = Vec::new();
        let mut central_layers = Vec::new();
        for l in 1..=config.layers {
            time_layers.push(MdRnnLayer::new(&mut store, rng, &format!("time{l}"), h, &TIME_DELAYED));
            if config.centralized {
                central_layers.push(if attention_layer == Some(l) {
                    Central::Attention(AttentionCell::new(&mut store, rng, &format!("attention{l}"), h, &config.attention)?)
                } else {
                    Central::Plain(CentralizedLayer::new(&mut store, rng, &format!("central{l}"), h))
                });
            }
            freq_layers.push(FrequencyDelayedLayer::new(&mut store, rng, &format!("freq{l}"), h));
        }
        let head = Linear::new(&mut store, rng, "head", h, 3 * config.components, true);
        Ok(Self {
            config,
            store,
            input_time,
            input_freq,
            input_central,
            cond,
            upsampling,
            text,
            time_layers,
            freq_layers,
            central_layers,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    /// Sets the head bias so that every component starts at `N(mean, std²)`,
    /// with the means spread by ±`std` to break symmetry.
    pub fn init_output_bias(&mut self, mean: f64, std: f64) {
        let k = self.config.components;
        let b = self.store.get_mut(self.head.bias.expect("head has a bias"));
        for c in 0..k {
            let spread = if k > 1 { 2.0 * c as f64 / (k - 1) as f64 - 1.0 } else { 0.0 };
            b[[0, c]] = mean + spread * std;
            b[[0, k + c]] = std.max(1e-3).ln();
            b[[0, 2 * k + c]] = 0.0;
        }
    }

    fn check_inputs(&self, frames: usize, channels: usize, cond: &Conditioning) -> Result<()> {
        if channels != self.config.channels {
            return Err(Error::shape(format!("{} channels", self.config.channels), format!("{channels} channels")));
        }
        if frames == 0 {
            return Err(Error::InvalidArgument("grid has no frames".into()));
        }
        match (cond.features, self.config.conditioning_dim) {
            (None, 0) => {}
            (Some(z), d) if d > 0 => {
                if z.dim() != (frames * channels, d) {
                    return Err(Error::shape(format!("{}x{d}", frames * channels), format!("{}x{}", z.nrows(), z.ncols())));
                }
            }
            (Some(_), _) => return Err(Error::InvalidArgument("network takes no conditioning features".into())),
            (None, _) => return Err(Error::InvalidArgument("conditioning features required".into())),
        }
        match (cond.context, self.upsampling.is_some()) {
            (None, false) => {}
            (Some(c), true) => {
                if c.dim() != (frames, channels) {
                    return Err(Error::shape(format!("{frames}x{channels}"), format!("{}x{}", c.nrows(), c.ncols())));
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("context grid".into()));
                }
            }
            (Some(_), false) => return Err(Error::InvalidArgument("network takes no lower-tier context".into())),
            (None, true) => return Err(Error::InvalidArgument("lower-tier context required".into())),
        }
        match (cond.text, &self.text) {
            (None, None) | (Some(_), Some(_)) => Ok(()),
            (Some(_), None) => Err(Error::InvalidArgument("network takes no text".into())),
            (None, Some(_)) => Err(Error::InvalidArgument("text required".into())),
        }
    }

    /// Conditioning contributions to the layer-0 time and frequency inputs,
    /// one row per grid element.
    fn conditioning_inputs(&self, cx: &mut Ctx, cond: &Conditioning) -> Option<(Var, Var)> {
        let mut parts: Vec<(Var, Var)> = Vec::new();
        if let (Some(z), Some((wt, wf))) = (cond.features, self.cond) {
            let zv = cx.constant(z.clone());
            let wt = cx.p(wt);
            let wf = cx.p(wf);
            parts.push((cx.matmul(zv, wt), cx.matmul(zv, wf)));
        }
        if let (Some(ctx), Some(up)) = (cond.context, &self.upsampling) {
            let feats = up.extractor.forward(cx, ctx);
            let wt = cx.p(up.to_time);
            let wf = cx.p(up.to_freq);
            parts.push((cx.matmul(feats, wt), cx.matmul(feats, wf)));
        }
        parts.into_iter().reduce(|a, b| (cx.add(a.0, b.0), cx.add(a.1, b.1)))
    }

    /// Builds the teacher-forced graph and returns the `[T·M × 3K]` raw
    /// parameters with per-frame attention records.
    fn build(&self, cx: &mut Ctx, x: &Array2<f64>, cond: &Conditioning) -> Result<(Var, Vec<AttentionState>)> {
        let (t, m) = x.dim();
        self.check_inputs(t, m, cond)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input grid".into()));
        }
        let geom = Geometry::new(t, m);
        let rows = geom.rows();

        let mut shifted_time = Array2::zeros((t, m));
        shifted_time.slice_mut(s![1.., ..]).assign(&x.slice(s![..t - 1, ..]));
        let mut shifted_freq = Array2::zeros((t, m));
        shifted_freq.slice_mut(s![.., 1..]).assign(&x.slice(s![.., ..m - 1]));

        let cond_in = self.conditioning_inputs(cx, cond);
        let col_t = cx.constant(shifted_time.clone().into_shape_with_order((rows, 1)).expect("contiguous"));
        let col_f = cx.constant(shifted_freq.into_shape_with_order((rows, 1)).expect("contiguous"));
        let wt = cx.p(self.input_time);
        let wf = cx.p(self.input_freq);
        let mut ht = cx.matmul(col_t, wt);
        let mut hf = cx.matmul(col_f, wf);
        if let Some((ct, cf)) = cond_in {
            ht = cx.add(ht, ct);
            hf = cx.add(hf, cf);
        }
        let mut hc = match self.input_central {
            Some(w) => {
                let frames = cx.constant(shifted_time);
                let w = cx.p(w);
                Some(cx.matmul(frames, w))
            }
            None => None,
        };
        let text = match (cond.text, &self.text) {
            (Some(chars), Some(enc)) => Some(enc.encode(cx, chars)?),
            _ => None,
        };

        let frame_rows = geom.frame_of_row();
        let mut attention = Vec::new();
        for l in 0..self.config.layers {
            ht = self.time_layers[l].forward(cx, ht, geom, None).0;
            let central = match (hc, self.central_layers.get(l)) {
                (Some(prev), Some(Central::Plain(layer))) => Some(layer.forward(cx, prev)),
                (Some(prev), Some(Central::Attention(cell))) => {
                    let feats = text.expect("text features present when attention is configured");
                    let mut carry = cell.initial(cx);
                    let mut outs = Vec::with_capacity(t);
                    for i in 0..t {
                        let y = cx.gather_rows(prev, vec![i]);
                        let (o, next, state, _) = cell.step(cx, y, carry, feats);
                        outs.push(o);
                        attention.push(state);
                        carry = next;
                    }
                    Some(cx.concat_rows(&outs))
                }
                _ => None,
            };
            hc = central;
            let broadcast = hc.map(|c| cx.gather_rows(c, frame_rows.clone()));
            hf = self.freq_layers[l].forward(cx, hf, ht, broadcast, geom);
        }
        Ok((self.head.apply(cx, hf), attention))
    }

    /// Teacher-forced pass without gradients.
    pub fn forward(&self, x: &Array2<f64>, cond: &Conditioning) -> Result<Forward> {
        let mut cx = Ctx::new(&self.store);
        let (theta, attention) = self.build(&mut cx, x, cond)?;
        let raw = cx.value(theta).clone();
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(Forward { raw, attention })
    }

    /// Constrained mixture parameters for every element of `x`.
    pub fn network_forward(&self, x: &Array2<f64>, cond: &Conditioning) -> Result<GmmParamGrid> {
        let f = self.forward(x, cond)?;
        let raw = RawParamGrid::from_rows(&f.raw, x.nrows(), x.ncols())?;
        constrain_params(&raw)
    }

    /// Teacher-forced NLL in nats/dim.
    pub fn nll(&self, x: &Array2<f64>, cond: &Conditioning) -> Result<f64> {
        let mut cx = Ctx::new(&self.store);
        let loss = self.loss_node(&mut cx, x, cond)?;
        Ok(cx.scalar(loss))
    }

    fn loss_node(&self, cx: &mut Ctx, x: &Array2<f64>, cond: &Conditioning) -> Result<Var> {
        let (theta, _) = self.build(cx, x, cond)?;
        let target: Vec<f64> = x.iter().copied().collect();
        let n = target.len() as f64;
        let total = cx.gmm_nll(theta, target, self.config.components);
        let loss = cx.scale(total, 1.0 / n);
        if !cx.scalar(loss).is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok(loss)
    }

    /// NLL in nats/dim and its gradient with respect to every parameter.
    pub fn nll_and_grad(&self, x: &Array2<f64>, cond: &Conditioning) -> Result<(f64, Gradients)> {
        let mut cx = Ctx::new(&self.store);
        let loss = self.loss_node(&mut cx, x, cond)?;
        cx.backward(loss);
        Ok((cx.scalar(loss), cx.gradients(&self.store)))
    }

    /// Terminal attention survival `1 − F_T(U + 0.5)` of a training pair.
    pub fn terminal_survival(&self, x: &Array2<f64>, cond: &Conditioning) -> Result<f64> {
        let chars = cond
            .text
            .ok_or_else(|| Error::InvalidArgument("terminal survival needs text".into()))?;
        let f = self.forward(x, cond)?;
        let last = f.attention.last().expect("one attention state per frame");
        Ok(last.survival(chars.len()))
    }

    /// Raw parameters recomputed frame by frame through the sampler's
    /// incremental path, with `x` forced as the generated values.
    pub fn incremental_forward(&self, x: &Array2<f64>, cond: &Conditioning) -> Result<Array2<f64>> {
        let (t, m) = x.dim();
        let mut raw = Array2::zeros((t * m, 3 * self.config.components));
        self.run_incremental(t, m, cond, None, None, |i, j, row| {
            raw.row_mut(i * m + j).assign(&ArrayView1::from(row));
            x[[i, j]]
        })?;
        Ok(raw)
    }

    /// Ancestral sampling in raster order.
    pub fn sample(
        &self,
        frames: usize,
        cond: &Conditioning,
        options: &SampleOptions,
        rng: &mut impl Rng,
    ) -> Result<Sampled> {
        if !(0.0..=1.0).contains(&options.temperature) {
            return Err(Error::InvalidArgument(format!("temperature {} outside [0, 1]", options.temperature)));
        }
        let m = self.config.channels;
        if let Some(p) = options.prime {
            if p.ncols() != m {
                return Err(Error::shape(format!("{m} channels"), format!("{} channels", p.ncols())));
            }
            if p.nrows() > frames {
                return Err(Error::InvalidArgument(format!(
                    "prime has {} frames but only {frames} were requested",
                    p.nrows()
                )));
            }
        }
        let temperature = options.temperature;
        let (grid, attention, stopped_at) = self.run_incremental(frames, m, cond, options.prime, options.stop_threshold, |_, _, row| {
            let mut gmm = Gmm::from_raw(row);
            for (sd, r) in gmm.stds.iter_mut().zip(&row[row.len() / 3..2 * row.len() / 3]) {
                *sd = r.max(MIN_LOG_SIGMA).exp();
            }
            sample_unchecked(&gmm, temperature, rng)
        })?;
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampled values".into()));
        }
        Ok(Sampled {
            grid,
            attention,
            stopped_at,
        })
    }

    /// Shared frame-by-frame driver. `choose(i, j, raw_row)` returns the
    /// value placed at `(i, j)`; frames covered by `prime` are copied instead
    /// and their frequency-delayed stack is skipped.
    fn run_incremental(
        &self,
        frames: usize,
        channels: usize,
        cond: &Conditioning,
        prime: Option<&Array2<f64>>,
        stop_threshold: Option<f64>,
        mut choose: impl FnMut(usize, usize, &[f64]) -> f64,
    ) -> Result<(Array2<f64>, Vec<AttentionState>, Option<usize>)> {
        self.check_inputs(frames, channels, cond)?;
        let m = channels;
        let layers = self.config.layers;

        // Quantities that do not depend on generated values.
        let (cond_time, cond_freq, text_features) = {
            let mut cx = Ctx::new(&self.store);
            let c = self.conditioning_inputs(&mut cx, cond);
            let c = c.map(|(a, b)| (cx.value(a).clone(), cx.value(b).clone()));
            let text = match (cond.text, &self.text) {
                (Some(chars), Some(enc)) => {
                    let v = enc.encode(&mut cx, chars)?;
                    Some(cx.value(v).clone())
                }
                _ => None,
            };
            match c {
                Some((a, b)) => (Some(a), Some(b), text),
                None => (None, None, text),
            }
        };
        let text_len = cond.text.map(CharSequence::len).unwrap_or(0);

        let mut grid = Array2::<f64>::zeros((frames, m));
        let clamped = prime.map_or(0, |p| p.nrows());
        if let Some(p) = prime {
            grid.slice_mut(s![..clamped, ..]).assign(p);
        }
        let mut time_carry: Vec<Option<(Array2<f64>, Array2<f64>)>> = vec![None; layers];
        let mut central_carry: Vec<Option<Vec<Array2<f64>>>> = vec![None; layers];
        let mut attention = Vec::new();
        let mut stopped_at = None;
        let frame_geom = Geometry::new(1, m);

        for i in 0..frames {
            let mut cx = Ctx::new(&self.store);
            let prev: Array2<f64> = if i == 0 {
                Array2::zeros((1, m))
            } else {
                grid.slice(s![i - 1..i, ..]).to_owned()
            };

            // Time-delayed stack for frame i.
            let prev_col = cx.constant(prev.clone().into_shape_with_order((m, 1)).expect("contiguous"));
            let wt = cx.p(self.input_time);
            let mut ht = cx.matmul(prev_col, wt);
            if let Some(ct) = &cond_time {
                let rows = cx.constant(ct.slice(s![i * m..(i + 1) * m, ..]).to_owned());
                ht = cx.add(ht, rows);
            }
            let mut time_outputs = Vec::with_capacity(layers);
            for (l, layer) in self.time_layers.iter().enumerate() {
                let state = time_carry[l].as_ref().map(|(a, b)| (cx.constant(a.clone()), cx.constant(b.clone())));
                let (out, last) = layer.forward(&mut cx, ht, frame_geom, state);
                let last = last.expect("time-delayed layers run forward in time");
                time_carry[l] = Some((cx.value(last.0).clone(), cx.value(last.1).clone()));
                ht = out;
                time_outputs.push(ht);
            }

            // Centralized stack for frame i.
            let mut central_outputs: Vec<Option<Var>> = vec![None; layers];
            let mut stop_now = false;
            if let Some(w) = self.input_central {
                let pv = cx.constant(prev);
                let w = cx.p(w);
                let mut hc = cx.matmul(pv, w);
                for (l, layer) in self.central_layers.iter().enumerate() {
                    let saved = central_carry[l].take();
                    match layer {
                        Central::Plain(c) => {
                            let state: LstmState = match &saved {
                                Some(v) => (cx.constant(v[0].clone()), cx.constant(v[1].clone())),
                                None => c.initial(&mut cx),
                            };
                            let (out, st) = c.step(&mut cx, hc, state);
                            central_carry[l] = Some(vec![cx.value(st.0).clone(), cx.value(st.1).clone()]);
                            hc = out;
                        }
                        Central::Attention(cell) => {
                            let feats = cx.constant(text_features.clone().expect("text features"));
                            let carry = match &saved {
                                Some(v) => AttentionCarry {
                                    rnn: (cx.constant(v[0].clone()), cx.constant(v[1].clone())),
                                    kappa: cx.constant(v[2].clone()),
                                    w: cx.constant(v[3].clone()),
                                },
                                None => cell.initial(&mut cx),
                            };
                            let (out, next, state, survival) = cell.step(&mut cx, hc, carry, feats);
                            central_carry[l] = Some(vec![
                                cx.value(next.rnn.0).clone(),
                                cx.value(next.rnn.1).clone(),
                                cx.value(next.kappa).clone(),
                                cx.value(next.w).clone(),
                            ]);
                            debug_assert!((survival - state.survival(text_len)).abs() < 1e-9);
                            if let Some(tau) = stop_threshold {
                                stop_now = survival > tau;
                            }
                            attention.push(state);
                            hc = out;
                        }
                    }
                    central_outputs[l] = Some(hc);
                }
            }

            if i >= clamped {
                let wf = cx.p(self.input_freq);
                let mut freq_state: Vec<Option<LstmState>> = vec![None; layers];
                for j in 0..m {
                    let x_prev = if j == 0 { 0.0 } else { grid[[i, j - 1]] };
                    let xv = cx.constant(Array2::from_elem((1, 1), x_prev));
                    let mut hf = cx.matmul(xv, wf);
                    if let Some(cf) = &cond_freq {
                        let row = cx.constant(cf.slice(s![i * m + j..i * m + j + 1, ..]).to_owned());
                        hf = cx.add(hf, row);
                    }
                    for (l, layer) in self.freq_layers.iter().enumerate() {
                        let htr = cx.gather_rows(time_outputs[l], vec![j]);
                        let state = freq_state[l].unwrap_or_else(|| layer.initial(&mut cx));
                        let (out, st) = layer.step(&mut cx, hf, htr, central_outputs[l], state);
                        freq_state[l] = Some(st);
                        hf = out;
                    }
                    let theta = self.head.apply(&mut cx, hf);
                    let row: Vec<f64> = cx.value(theta).iter().copied().collect();
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("network output at ({i}, {j})")));
                    }
                    let x = choose(i, j, &row);
                    if !x.is_finite() {
                        return Err(Error::NonFinite(format!("sample at ({i}, {j})")));
                    }
                    grid[[i, j]] = x;
                }
            }
            if stop_now {
                stopped_at = Some(i + 1);
                grid = grid.slice(s![..i + 1, ..]).to_owned();
                break;
            }
        }
        Ok((grid, attention, stopped_at))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize, hidden: usize, k: usize, channels: usize) -> NetworkConfig {
        NetworkConfig {
            layers,
            hidden,
            components: k,
            channels,
            centralized: true,
            ..NetworkConfig::default()
        }
    }

    fn grid(rng: &mut impl Rng, t: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, m), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shapes() {
        let net = MelNet::new(tiny(2, 4, 3, 5), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = grid(&mut rng, 4, 5);
        let g = net.network_forward(&x, &Conditioning::default()).unwrap();
        assert_eq!((g.frames(), g.channels(), g.components()), (4, 5, 3));
        assert_eq!(g.means.dim(), (4, 5, 3));
    }

    #[test]
    fn layer_zero_shift_boundaries() {
        let net = MelNet::new(tiny(1, 3, 1, 4), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = grid(&mut rng, 3, 4);
        // Perturbing (i, j) must leave every raster-earlier-or-equal θ alone
        // and move (i, j+1) or (i+1, *).
        let base = net.forward(&x, &Conditioning::default()).unwrap().raw;
        let mut p = x.clone();
        p[[1, 2]] += 1.0;
        let out = net.forward(&p, &Conditioning::default()).unwrap().raw;
        assert_ne!(out.row(7), base.row(7));
        for r in 0..=6 {
            assert_eq!(out.row(r), base.row(r));
        }
    }

    #[test]
    fn exhaustive_causality() {
        let net = MelNet::new(tiny(2, 8, 2, 6), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, m) = (8, 6);
        let x = grid(&mut rng, t, m);
        let base = net.forward(&x, &Conditioning::default()).unwrap().raw;
        for p in 0..t * m {
            let mut pert = x.clone();
            pert[[p / m, p % m]] += 0.7;
            let out = net.forward(&pert, &Conditioning::default()).unwrap().raw;
            for r in 0..=p {
                assert_eq!(out.row(r), base.row(r), "θ at raster {r} moved after perturbing {p}");
            }
        }
    }

    #[test]
    fn deterministic_forward() {
        let net = MelNet::new(tiny(2, 4, 2, 3), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = grid(&mut rng, 4, 3);
        let a = net.forward(&x, &Conditioning::default()).unwrap().raw;
        let b = net.forward(&x, &Conditioning::default()).unwrap().raw;
        assert_eq!(a, b);
        let twin = MelNet::new(tiny(2, 4, 2, 3), 4).unwrap();
        assert_eq!(twin.forward(&x, &Conditioning::default()).unwrap().raw, a);
    }

    #[test]
    fn white_noise_nll_is_finite_and_positive() {
        for seed in 0..3 {
            let net = MelNet::new(tiny(2, 4, 3, 4), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let normal = rand_distr::StandardNormal;
            let x = Array2::from_shape_fn((6, 4), |_| rng.sample::<f64, _>(normal));
            let nll = net.nll(&x, &Conditioning::default()).unwrap();
            assert!(nll.is_finite() && nll > 0.0 && nll < 10.0, "{nll}");
        }
    }

    #[test]
    fn incremental_path_matches_full_forward() {
        let mut cfg = tiny(3, 5, 2, 4);
        cfg.conditioning_dim = 2;
        let net = MelNet::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = grid(&mut rng, 5, 4);
        let z = speaker_features(1, 2, 5, 4).unwrap();
        let cond = Conditioning {
            features: Some(&z),
            ..Default::default()
        };
        let full = net.forward(&x, &cond).unwrap().raw;
        let inc = net.incremental_forward(&x, &cond).unwrap();
        for (a, b) in full.iter().zip(&inc) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn incremental_path_with_text_and_context() {
        let cfg = NetworkConfig {
            vocab_size: 5,
            feature_layers: 1,
            attention: AttentionConfig {
                components: 2,
                rate_init: 0.5,
            },
            ..tiny(2, 4, 2, 3)
        };
        let net = MelNet::new(cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = grid(&mut rng, 4, 3);
        let ctx = grid(&mut rng, 4, 3);
        let chars = CharSequence::new(vec![0, 3, 1], 5).unwrap();
        let cond = Conditioning {
            context: Some(&ctx),
            text: Some(&chars),
            ..Default::default()
        };
        let full = net.forward(&x, &cond).unwrap();
        assert_eq!(full.attention.len(), 4);
        let inc = net.incremental_forward(&x, &cond).unwrap();
        for (a, b) in full.raw.iter().zip(&inc) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_shape_prime_and_determinism() {
        let net = MelNet::new(tiny(2, 4, 2, 3), 7).unwrap();
        let opts = SampleOptions {
            temperature: 0.0,
            ..Default::default()
        };
        let a = net.sample(5, &Conditioning::default(), &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = net.sample(5, &Conditioning::default(), &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.grid.dim(), (5, 3));
        assert_eq!(a.grid, b.grid);

        let prime = a.grid.slice(s![..2, ..]).to_owned();
        let opts = SampleOptions {
            temperature: 1.0,
            prime: Some(&prime),
            ..Default::default()
        };
        let c = net.sample(5, &Conditioning::default(), &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(c.grid.slice(s![..2, ..]), prime);

        let full = a.grid.clone();
        let opts = SampleOptions {
            prime: Some(&full),
            ..Default::default()
        };
        let d = net.sample(5, &Conditioning::default(), &opts, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(d.grid, full);

        let long = Array2::zeros((6, 3));
        let opts = SampleOptions {
            prime: Some(&long),
            ..Default::default()
        };
        assert!(net.sample(5, &Conditioning::default(), &opts, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn stop_rule_truncates() {
        let cfg = NetworkConfig {
            vocab_size: 3,
            attention: AttentionConfig {
                components: 1,
                rate_init: 1.0,
            },
            ..tiny(2, 4, 1, 3)
        };
        let net = MelNet::new(cfg, 8).unwrap();
        let chars = CharSequence::new(vec![0, 1], 3).unwrap();
        let cond = Conditioning {
            text: Some(&chars),
            ..Default::default()
        };
        let opts = SampleOptions {
            temperature: 0.5,
            stop_threshold: Some(0.5),
            ..Default::default()
        };
        let s = net.sample(40, &cond, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let stop = s.stopped_at.expect("means advance about one character per frame");
        assert_eq!(s.grid.nrows(), stop);
        assert!(s.attention[stop - 1].survival(2) > 0.5);
        assert!(s.attention[..stop - 1].iter().all(|a| a.survival(2) <= 0.5));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let net = MelNet::new(tiny(1, 2, 1, 3), 0).unwrap();
        assert!(net.forward(&Array2::zeros((2, 4)), &Conditioning::default()).is_err());
        let z = Array2::zeros((6, 1));
        let cond = Conditioning {
            features: Some(&z),
            ..Default::default()
        };
        assert!(net.forward(&Array2::zeros((2, 3)), &cond).is_err());
        assert!(MelNet::new(NetworkConfig { layers: 0, ..tiny(1, 2, 1, 3) }, 0).is_err());
    }

    #[test]
    fn zero_input_gives_zero_layer_zero() {
        // With zero input and no conditioning the layer-0 states vanish, so
        // zeroing every parameter but the head bias yields θ̂ = bias.
        let mut net = MelNet::new(tiny(2, 3, 2, 3), 1).unwrap();
        for v in net.params_mut().values_mut() {
            v.fill(0.0);
        }
        net.init_output_bias(0.5, 2.0);
        let raw = net.forward(&Array2::zeros((2, 3)), &Conditioning::default()).unwrap().raw;
        let bias = net.params().get(net.head.bias.unwrap()).clone();
        for r in raw.rows() {
            assert_eq!(r, bias.row(0));
        }
    }

    /// Central differences over every parameter element.
    fn gradient_check(mut net: MelNet, x: &Array2<f64>, cond: &Conditioning) {
        let (_, grads) = net.nll_and_grad(x, cond).unwrap();
        let eps = 1e-5;
        for p in 0..net.params().len() {
            for e in 0..net.params().values()[p].len() {
                let orig = net.params().values()[p].as_slice().unwrap()[e];
                net.params_mut().values_mut()[p].as_slice_mut().unwrap()[e] = orig + eps;
                let up = net.nll(x, cond).unwrap();
                net.params_mut().values_mut()[p].as_slice_mut().unwrap()[e] = orig - eps;
                let dn = net.nll(x, cond).unwrap();
                net.params_mut().values_mut()[p].as_slice_mut().unwrap()[e] = orig;
                let numeric = (up - dn) / (2.0 * eps);
                let analytic = grads.values[p].as_slice().unwrap()[e];
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-4,
                    "{}[{e}]: analytic {analytic} numeric {numeric}",
                    net.params().names()[p]
                );
            }
        }
    }

    #[test]
    fn gradients_with_text_context_and_features() {
        let cfg = NetworkConfig {
            vocab_size: 4,
            feature_layers: 1,
            conditioning_dim: 2,
            attention: AttentionConfig {
                components: 2,
                rate_init: 0.7,
            },
            ..tiny(2, 2, 2, 3)
        };
        let net = MelNet::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = grid(&mut rng, 3, 3);
        let ctx = grid(&mut rng, 3, 3);
        let z = speaker_features(0, 2, 3, 3).unwrap();
        let chars = CharSequence::new(vec![2, 0], 4).unwrap();
        let cond = Conditioning {
            features: Some(&z),
            context: Some(&ctx),
            text: Some(&chars),
        };
        gradient_check(net, &x, &cond);
    }
}
