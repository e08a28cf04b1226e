//! Text conditioning: vocabulary, character encoder, location-based
//! attention with a discretized mixture of logistics, and the stop rule.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{sequence_steps, Ctx, Linear, Lstm, LstmState};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tape::{sigmoid, Var};
use crate::{Error, Result};

/// Character inventory. Ids follow line order in the vocabulary file.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for c in chars {
            let c = lower(c);
            if index.insert(c, out.len()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {c:?}")));
            }
            out.push(c);
        }
        if out.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(Self { chars: out, index })
    }

    /// One character per line. A line holding a single space is the space
    /// character; empty lines are skipped.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut chars = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (None, _) => continue,
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::Config(format!(
                        "{}:{}: expected one character per line",
                        path.display(),
                        n + 1
                    )))
                }
            }
        }
        Self::new(chars)
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    /// Lowercases and maps each character; unknown characters are rejected.
    pub fn encode(&self, text: &str) -> Result<CharSequence> {
        let tokens = text
            .chars()
            .map(|c| {
                let c = lower(c);
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::UnknownToken(c.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        CharSequence::new(tokens, self.len())
    }
}

fn lower(c: char) -> char {
    let mut l = c.to_lowercase();
    match (l.next(), l.next()) {
        (Some(x), None) => x,
        _ => c,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharSequence {
    tokens: Vec<usize>,
}

impl CharSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("character sequence is empty".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Embedding followed by a bidirectional LSTM and a projection to `H`.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab_size: usize,
    embedding: ParamId,
    forward: Lstm,
    backward: Lstm,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, vocab_size: usize, hidden: usize) -> Self {
        let embedding = store.add(format!("{name}.embedding"), uniform_init(rng, vocab_size, hidden));
        Self {
            vocab_size,
            embedding,
            forward: Lstm::new(store, rng, &format!("{name}.fwd"), hidden, hidden),
            backward: Lstm::new(store, rng, &format!("{name}.bwd"), hidden, hidden),
            proj: Linear::new(store, rng, &format!("{name}.proj"), 2 * hidden, hidden, false),
        }
    }

    /// Character features `[U × H]`.
    pub fn encode(&self, cx: &mut Ctx, chars: &CharSequence) -> Result<Var> {
        if let Some(&bad) = chars.tokens().iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        let table = cx.p(self.embedding);
        let e = cx.gather_rows(table, chars.tokens().to_vec());
        let u = chars.len();
        let gf = self.forward.input_gates(cx, e);
        let (hf, _) = self.forward.scan(cx, gf, &sequence_steps(u, false), None);
        let gb = self.backward.input_gates(cx, e);
        let (hb, _) = self.backward.scan(cx, gb, &sequence_steps(u, true), None);
        let cat = cx.concat_cols(&[hf, hb]);
        Ok(self.proj.apply(cx, cat))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Number of logistic components.
    pub components: usize,
    /// Initial advance of every mean per frame, in characters.
    pub rate_init: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            components: 10,
            rate_init: 1.0,
        }
    }
}

/// Attention parameters γ = {κ, β, α} at one timestep and the resulting
/// attention vector `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub kappa: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub w: Vec<f64>,
}

impl AttentionState {
    pub fn components(&self) -> usize {
        self.kappa.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.kappa.len();
        if m == 0 || self.beta.len() != m || self.alpha.len() != m {
            return Err(Error::InvalidArgument("attention parameter lengths differ or are empty".into()));
        }
        if self.kappa.iter().chain(&self.beta).chain(&self.alpha).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention parameters".into()));
        }
        if self.beta.iter().any(|&b| b <= 0.0) {
            return Err(Error::InvalidArgument("attention scales must be positive".into()));
        }
        let total: f64 = self.alpha.iter().sum();
        if self.alpha.iter().any(|&a| a < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("attention weights are not a simplex (sum {total})")));
        }
        Ok(())
    }

    /// Mixture distribution function `F(v)`.
    pub fn cdf(&self, v: f64) -> f64 {
        self.kappa
            .iter()
            .zip(&self.beta)
            .zip(&self.alpha)
            .map(|((&k, &b), &a)| a * sigmoid((v - k) / b))
            .sum()
    }

    /// Survival `1 − F(U + 0.5)`, computed without cancellation.
    pub fn survival(&self, len: usize) -> f64 {
        let v = len as f64 + 0.5;
        self.kappa
            .iter()
            .zip(&self.beta)
            .zip(&self.alpha)
            .map(|((&k, &b), &a)| a * sigmoid((k - v) / b))
            .sum()
    }
}

/// Per-character masses `φ(1..=U)` with the mass left of the first
/// character and the survival mass past the last.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedAttention {
    pub phi: Vec<f64>,
    pub left: f64,
    pub survival: f64,
}

impl DiscretizedAttention {
    pub fn total(&self) -> f64 {
        self.phi.iter().sum::<f64>() + self.left + self.survival
    }

    /// 0-based index of the most attended character.
    pub fn argmax(&self) -> usize {
        self.phi
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (u, &p)| if p > best.1 { (u, p) } else { best })
            .0
    }
}

pub fn discretized_attention_weights(gamma: &AttentionState, len: usize) -> Result<DiscretizedAttention> {
    gamma.validate()?;
    Ok(masses_unchecked(gamma, len))
}

fn masses_unchecked(gamma: &AttentionState, len: usize) -> DiscretizedAttention {
    let mut phi = vec![0.0; len];
    let mut left = 0.0;
    let mut survival = 0.0;
    for ((&k, &b), &a) in gamma.kappa.iter().zip(&gamma.beta).zip(&gamma.alpha) {
        let mut prev = sigmoid((0.5 - k) / b);
        left += a * prev;
        for (u, p) in phi.iter_mut().enumerate() {
            let next = sigmoid((u as f64 + 1.5 - k) / b);
            *p += a * (next - prev);
            prev = next;
        }
        survival += a * (1.0 - prev);
    }
    DiscretizedAttention { phi, left, survival }
}

/// Stop once the belief of having read past the last character exceeds `tau`.
pub fn should_terminate(gamma: &AttentionState, len: usize, tau: f64) -> bool {
    gamma.survival(len) > tau
}

/// Mean terminal survival over a dataset.
pub fn estimate_tau(terminal_survivals: &[f64]) -> Result<f64> {
    if terminal_survivals.is_empty() {
        return Err(Error::EmptyDataset("no examples to estimate the stop threshold".into()));
    }
    Ok(terminal_survivals.iter().sum::<f64>() / terminal_survivals.len() as f64)
}

/// Recurrent carry of the attention cell between frames.
#[derive(Debug, Clone, Copy)]
pub struct AttentionCarry {
    pub rnn: LstmState,
    pub kappa: Var,
    pub w: Var,
}

/// Attention RNN living in the centralized stack. Its output is
/// `W_out·[h_i; w_i] + y_i`.
#[derive(Debug, Clone)]
pub struct AttentionCell {
    hidden: usize,
    components: usize,
    rnn: Lstm,
    gamma: Linear,
    out: ParamId,
}

impl AttentionCell {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, hidden: usize, config: &AttentionConfig) -> Result<Self> {
        if config.components == 0 {
            return Err(Error::Config("attention.components must be positive".into()));
        }
        if !(config.rate_init > 0.0 && config.rate_init.is_finite()) {
            return Err(Error::Config("attention.rate_init must be positive".into()));
        }
        let m = config.components;
        let rnn = Lstm::new(store, rng, &format!("{name}.rnn"), 2 * hidden, hidden);
        let gamma = Linear::new(store, rng, &format!("{name}.gamma"), hidden, 3 * m, true);
        // Small map so the biases set the initial behaviour.
        store.get_mut(gamma.weight).mapv_inplace(|v| v * 0.1);
        let bias = store.get_mut(gamma.bias.expect("gamma has a bias"));
        for c in 0..m {
            bias[[0, c]] = config.rate_init.ln();
        }
        let out = store.add(format!("{name}.out"), uniform_init(rng, 2 * hidden, hidden));
        Ok(Self {
            hidden,
            components: m,
            rnn,
            gamma,
            out,
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// κ₀ = 0 and w₀ = 0.
    pub fn initial(&self, cx: &mut Ctx) -> AttentionCarry {
        let rnn = self.rnn.initial(cx, 1);
        let kappa = cx.constant(Array2::zeros((1, self.components)));
        let w = cx.constant(Array2::zeros((1, self.hidden)));
        AttentionCarry { rnn, kappa, w }
    }

    /// One timestep. `features` are the `[U × H]` character features.
    pub fn step(&self, cx: &mut Ctx, y: Var, carry: AttentionCarry, features: Var) -> (Var, AttentionCarry, AttentionState, f64) {
        let len = cx.shape(features).0;
        let m = self.components;
        let input = cx.concat_cols(&[y, carry.w]);
        let gates = self.rnn.input_gates(cx, input);
        let rnn = self.rnn.step(cx, gates, carry.rnn);
        let g = self.gamma.apply(cx, rnn.0);
        let kh = cx.slice_cols(g, 0, m);
        let bh = cx.slice_cols(g, m, m);
        let ah = cx.slice_cols(g, 2 * m, m);
        let dk = cx.exp(kh);
        let kappa = cx.add(carry.kappa, dk);
        let beta = cx.exp(bh);
        let alpha = cx.softmax_rows(ah);
        let mass = cx.logistic_mixture_mass(kappa, beta, alpha, len);
        let phi = cx.slice_cols(mass, 0, len);
        let w = cx.matmul(phi, features);
        let hw = cx.concat_cols(&[rnn.0, w]);
        let wo = cx.p(self.out);
        let o = cx.matmul(hw, wo);
        let out = cx.add(o, y);
        let state = AttentionState {
            kappa: cx.value(kappa).iter().copied().collect(),
            beta: cx.value(beta).iter().copied().collect(),
            alpha: cx.value(alpha).iter().copied().collect(),
            w: cx.value(w).iter().copied().collect(),
        };
        let survival = cx.value(mass)[[0, len + 1]];
        (out, AttentionCarry { rnn, kappa, w }, state, survival)
    }
}
