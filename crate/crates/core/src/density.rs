//! Per-element Gaussian-mixture factors: constraint transforms, log-density,
//! tempered sampling and whole-grid NLL.

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tape::{gmm_row_terms, MIN_LOG_SIGMA};
use crate::{Error, Result};

/// Unconstrained network outputs, `[T × M × 3K]` laid out as `μ̂ | σ̂ | π̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParamGrid {
    pub values: Array3<f64>,
}

impl RawParamGrid {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.shape()[2] % 3 != 0 || values.shape()[2] == 0 {
            return Err(Error::shape("last dimension divisible by 3", values.shape()[2]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw mixture parameters".into()));
        }
        Ok(Self { values })
    }

    /// From a flat `[T·M × 3K]` network output.
    pub fn from_rows(rows: &Array2<f64>, frames: usize, channels: usize) -> Result<Self> {
        if rows.nrows() != frames * channels {
            return Err(Error::shape(frames * channels, rows.nrows()));
        }
        let width = rows.ncols();
        let values = rows
            .to_owned()
            .into_shape_with_order((frames, channels, width))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(values)
    }

    pub fn components(&self) -> usize {
        self.values.shape()[2] / 3
    }
}

/// Constrained mixture parameters, each `[T × M × K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParamGrid {
    pub means: Array3<f64>,
    pub stds: Array3<f64>,
    pub weights: Array3<f64>,
}

impl GmmParamGrid {
    pub fn components(&self) -> usize {
        self.means.shape()[2]
    }

    pub fn frames(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn element(&self, i: usize, j: usize) -> Gmm {
        Gmm {
            means: self.means.slice(s![i, j, ..]).to_vec(),
            stds: self.stds.slice(s![i, j, ..]).to_vec(),
            weights: self.weights.slice(s![i, j, ..]).to_vec(),
        }
    }
}

/// A single univariate Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Gmm {
    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 || self.stds.len() != k || self.weights.len() != k {
            return Err(Error::InvalidArgument("mixture component counts differ".into()));
        }
        if self.stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("mixture std must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("weights are not a simplex (sum {total})")));
        }
        Ok(())
    }

    /// Constrain one raw row `μ̂ | σ̂ | π̂`.
    pub fn from_raw(row: &[f64]) -> Self {
        let k = row.len() / 3;
        let logits = &row[2 * k..];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self {
            means: row[..k].to_vec(),
            stds: row[k..2 * k].iter().map(|s| s.exp()).collect(),
            weights: exps.iter().map(|e| e / z).collect(),
        }
    }
}

/// `μ = μ̂`, `σ = exp(σ̂)`, `π = softmax(π̂)` elementwise.
pub fn constrain_params(raw: &RawParamGrid) -> Result<GmmParamGrid> {
    if raw.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw mixture parameters".into()));
    }
    let (t, m, width) = raw.values.dim();
    let k = width / 3;
    let mut means = Array3::zeros((t, m, k));
    let mut stds = Array3::zeros((t, m, k));
    let mut weights = Array3::zeros((t, m, k));
    for i in 0..t {
        for j in 0..m {
            let row = raw.values.slice(s![i, j, ..]).to_vec();
            let g = Gmm::from_raw(&row);
            for c in 0..k {
                means[[i, j, c]] = g.means[c];
                stds[[i, j, c]] = g.stds[c];
                weights[[i, j, c]] = g.weights[c];
            }
        }
    }
    Ok(GmmParamGrid { means, stds, weights })
}

/// `ln Σ_k π_k N(v; μ_k, σ_k)` via log-sum-exp.
pub fn gmm_log_density(v: f64, gmm: &Gmm) -> Result<f64> {
    gmm.validate()?;
    Ok(log_density_unchecked(v, gmm))
}

pub(crate) fn log_density_unchecked(v: f64, gmm: &Gmm) -> f64 {
    let terms: Vec<f64> = gmm
        .means
        .iter()
        .zip(&gmm.stds)
        .zip(&gmm.weights)
        .map(|((&mu, &sd), &w)| {
            let z = (v - mu) / sd;
            w.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * z * z
        })
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Draw a component from `π`, then a value from `N(μ_k, (t·σ_k)²)`.
/// Temperature scales σ only.
pub fn gmm_sample(gmm: &Gmm, temperature: f64, rng: &mut impl Rng) -> Result<f64> {
    gmm.validate()?;
    if !(0.0..=1.0).contains(&temperature) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} outside [0, 1]")));
    }
    Ok(sample_unchecked(gmm, temperature, rng))
}

pub(crate) fn sample_unchecked(gmm: &Gmm, temperature: f64, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = gmm.weights.len() - 1;
    for (c, &w) in gmm.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = c;
            break;
        }
    }
    // Guard against a zero-weight tail component absorbing rounding slack.
    while gmm.weights[k] == 0.0 && k > 0 {
        k -= 1;
    }
    let noise: f64 = StandardNormal.sample(rng);
    gmm.means[k] + temperature * gmm.stds[k] * noise
}

/// `-(1/(T·M)) Σ_ij ln p(x_ij | θ_ij)` in nats/dim.
pub fn spectrogram_nll(x: &Array2<f64>, params: &GmmParamGrid) -> Result<f64> {
    let (t, m) = x.dim();
    if params.frames() != t || params.channels() != m {
        return Err(Error::shape(
            format!("{t}x{m}"),
            format!("{}x{}", params.frames(), params.channels()),
        ));
    }
    let mut total = 0.0;
    for i in 0..t {
        for j in 0..m {
            total += log_density_unchecked(x[[i, j]], &params.element(i, j));
        }
    }
    Ok(-total / (t * m) as f64)
}

/// NLL directly from a raw `[N × 3K]` row matrix (σ clamped at 1e-8 as in
/// training). Returns nats/dim.
pub fn raw_rows_nll(rows: &Array2<f64>, target: &[f64]) -> f64 {
    let k = rows.ncols() / 3;
    let total: f64 = rows
        .rows()
        .into_iter()
        .zip(target)
        .map(|(r, &x)| gmm_row_terms(&r.to_vec(), x, k).log_density)
        .sum();
    -total / target.len() as f64
}

/// Training-time lower bound on `ln σ`.
pub const MIN_LOG_STD: f64 = MIN_LOG_SIGMA;
