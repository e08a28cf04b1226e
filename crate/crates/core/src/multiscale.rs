//! Tier decomposition by even/odd splitting, the alternating axis schedule,
//! and coarse-to-fine sampling.

use ndarray::{s, Array2, Axis as NdAxis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::log_density_unchecked;
use crate::network::{Conditioning, MelNet, SampleOptions};
use crate::tts::AttentionState;
use crate::{Error, Result};

/// Grid axis in time-major layout: time indexes rows, frequency columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Time,
    Frequency,
}

impl Axis {
    fn nd(self) -> NdAxis {
        match self {
            Axis::Time => NdAxis(0),
            Axis::Frequency => NdAxis(1),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Axis::Time => Axis::Frequency,
            Axis::Frequency => Axis::Time,
        }
    }
}

/// `(even, odd)` rows along `axis`, 0-indexed: the even part holds indices
/// 0, 2, 4, …
pub fn split(x: &Array2<f64>, axis: Axis) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = x.len_of(axis.nd());
    if n % 2 != 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("cannot split a {:?} axis of size {n}", axis)));
    }
    let (even, odd) = match axis {
        Axis::Time => (x.slice(s![0..;2, ..]), x.slice(s![1..;2, ..])),
        Axis::Frequency => (x.slice(s![.., 0..;2]), x.slice(s![.., 1..;2])),
    };
    Ok((even.to_owned(), odd.to_owned()))
}

/// Inverse of [`split`]: alternates rows of `even` and `odd`, starting with `even`.
pub fn interleave(even: &Array2<f64>, odd: &Array2<f64>, axis: Axis) -> Result<Array2<f64>> {
    if even.dim() != odd.dim() {
        return Err(Error::shape(
            format!("{}x{}", even.nrows(), even.ncols()),
            format!("{}x{}", odd.nrows(), odd.ncols()),
        ));
    }
    let (r, c) = even.dim();
    let mut out = match axis {
        Axis::Time => Array2::zeros((2 * r, c)),
        Axis::Frequency => Array2::zeros((r, 2 * c)),
    };
    match axis {
        Axis::Time => {
            out.slice_mut(s![0..;2, ..]).assign(even);
            out.slice_mut(s![1..;2, ..]).assign(odd);
        }
        Axis::Frequency => {
            out.slice_mut(s![.., 0..;2]).assign(even);
            out.slice_mut(s![.., 1..;2]).assign(odd);
        }
    }
    Ok(out)
}

/// Split axes per tier: `axes[g - 2]` is the axis along which tier `g`
/// is separated from (and later interleaved with) the grid of tiers below it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisSchedule {
    axes: Vec<Axis>,
}

impl AxisSchedule {
    pub fn new(axes: Vec<Axis>) -> Self {
        Self { axes }
    }

    pub fn tiers(&self) -> usize {
        self.axes.len() + 1
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    /// Axis separating tier `g` (2..=G).
    pub fn axis(&self, g: usize) -> Axis {
        self.axes[g - 2]
    }

    /// Shapes of tiers 1..=G for a full `(frames, channels)` grid.
    pub fn tier_shapes(&self, full: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        let mut shapes = Vec::with_capacity(self.tiers());
        let mut rest = full;
        for g in (2..=self.tiers()).rev() {
            let (t, m) = rest;
            rest = match self.axis(g) {
                Axis::Time if t % 2 == 0 && t > 0 => (t / 2, m),
                Axis::Frequency if m % 2 == 0 && m > 0 => (t, m / 2),
                axis => {
                    return Err(Error::InvalidArgument(format!(
                        "{t}x{m} grid cannot be split along {axis:?} for tier {g}"
                    )))
                }
            };
            shapes.push(rest);
        }
        shapes.push(rest);
        shapes.reverse();
        Ok(shapes)
    }

    /// Shape of `x^{<g+1}`, i.e. tiers 1..=g recombined.
    pub fn recombined_shape(&self, full: (usize, usize), g: usize) -> Result<(usize, usize)> {
        let shapes = self.tier_shapes(full)?;
        if g == 0 || g > shapes.len() {
            return Err(Error::InvalidArgument(format!("tier {g} out of range")));
        }
        let mut shape = shapes[0];
        for tier in 2..=g {
            shape = match self.axis(tier) {
                Axis::Time => (shape.0 * 2, shape.1),
                Axis::Frequency => (shape.0, shape.1 * 2),
            };
        }
        Ok(shape)
    }

    /// Frequency split for the top tier, then alternating downwards.
    pub fn alternating(tiers: usize) -> Result<Self> {
        if tiers == 0 {
            return Err(Error::InvalidArgument("need at least one tier".into()));
        }
        let axes = (2..=tiers)
            .map(|g| if (tiers - g) % 2 == 0 { Axis::Frequency } else { Axis::Time })
            .collect();
        Ok(Self::new(axes))
    }

    /// Frame and channel counts of the full grid must be multiples of these.
    pub fn divisors(&self) -> (usize, usize) {
        let t = self.axes.iter().filter(|&&a| a == Axis::Time).count();
        let f = self.axes.len() - t;
        (1 << t, 1 << f)
    }
}

/// Alternating schedule with frequency at the top of the recursion: the
/// last tier is split off along frequency, the one below along time, and so on.
pub fn default_schedule(tiers: usize, full: (usize, usize)) -> Result<AxisSchedule> {
    let schedule = AxisSchedule::alternating(tiers)?;
    schedule.tier_shapes(full)?;
    Ok(schedule)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierSet {
    /// `tiers[0]` is tier 1, the coarsest.
    pub tiers: Vec<Array2<f64>>,
    pub schedule: AxisSchedule,
}

impl TierSet {
    pub fn len(&self) -> usize {
        self.tiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiers.is_empty()
    }

    pub fn tier(&self, g: usize) -> &Array2<f64> {
        &self.tiers[g - 1]
    }

    /// `x^{<g}`: tiers 1..g−1 recombined. Its shape equals that of tier `g`.
    pub fn context(&self, g: usize) -> Result<Array2<f64>> {
        if g < 2 || g > self.len() {
            return Err(Error::InvalidArgument(format!("tier {g} has no context")));
        }
        let mut acc = self.tiers[0].clone();
        for tier in 2..g {
            acc = interleave(&self.tiers[tier - 1], &acc, self.schedule.axis(tier))?;
        }
        Ok(acc)
    }

    pub fn recombine(&self) -> Result<Array2<f64>> {
        let mut acc = self.tiers[0].clone();
        for g in 2..=self.len() {
            acc = interleave(&self.tiers[g - 1], &acc, self.schedule.axis(g))?;
        }
        Ok(acc)
    }
}

/// `x^g, x^{<g} = split(x^{<g+1})` from the top tier down.
pub fn decompose(x: &Array2<f64>, schedule: &AxisSchedule) -> Result<TierSet> {
    schedule.tier_shapes(x.dim())?;
    let g_max = schedule.tiers();
    let mut rest = x.clone();
    let mut top_down = Vec::with_capacity(g_max);
    for g in (2..=g_max).rev() {
        let (even, odd) = split(&rest, schedule.axis(g))?;
        top_down.push(even);
        rest = odd;
    }
    top_down.push(rest);
    top_down.reverse();
    Ok(TierSet {
        tiers: top_down,
        schedule: schedule.clone(),
    })
}

fn check_models(models: &[MelNet], schedule: &AxisSchedule) -> Result<()> {
    if models.len() != schedule.tiers() {
        return Err(Error::CheckpointMismatch(format!(
            "{} tier models for a {}-tier schedule",
            models.len(),
            schedule.tiers()
        )));
    }
    for (g, net) in models.iter().enumerate().skip(1) {
        if net.config().feature_layers == 0 {
            return Err(Error::CheckpointMismatch(format!("tier {} model has no feature extractor", g + 1)));
        }
    }
    Ok(())
}

/// Per-tier log-likelihoods `ln p(x^g | x^{<g})` in nats (not normalized).
/// Their sum is the joint log-likelihood under the tier factorization.
pub fn tier_log_likelihoods(models: &[MelNet], tiers: &TierSet, first: &Conditioning) -> Result<Vec<f64>> {
    check_models(models, &tiers.schedule)?;
    let mut out = Vec::with_capacity(tiers.len());
    for (g, net) in models.iter().enumerate().map(|(i, n)| (i + 1, n)) {
        let x = tiers.tier(g);
        let ctx;
        let cond = if g == 1 {
            *first
        } else {
            ctx = tiers.context(g)?;
            Conditioning {
                context: Some(&ctx),
                ..Default::default()
            }
        };
        let nll = net.nll(x, &cond)?;
        out.push(-nll * x.len() as f64);
    }
    Ok(out)
}

/// Element-by-element summation of the same quantity, used to cross-check
/// [`tier_log_likelihoods`].
pub fn joint_log_likelihood_direct(models: &[MelNet], tiers: &TierSet, first: &Conditioning) -> Result<f64> {
    check_models(models, &tiers.schedule)?;
    let mut total = 0.0;
    for (g, net) in models.iter().enumerate().map(|(i, n)| (i + 1, n)) {
        let x = tiers.tier(g);
        let ctx;
        let cond = if g == 1 {
            *first
        } else {
            ctx = tiers.context(g)?;
            Conditioning {
                context: Some(&ctx),
                ..Default::default()
            }
        };
        let params = net.network_forward(x, &cond)?;
        for ((i, j), &v) in x.indexed_iter() {
            total += log_density_unchecked(v, &params.element(i, j));
        }
    }
    Ok(total)
}

/// Result of coarse-to-fine sampling.
#[derive(Debug, Clone)]
pub struct MultiscaleSample {
    pub grid: Array2<f64>,
    /// Tier-1 attention per frame (text-conditioned models only).
    pub attention: Vec<AttentionState>,
    /// Tier-1 frame count at which the stop rule fired.
    pub stopped_at: Option<usize>,
}

/// Samples tier 1 (with `first` conditioning and `options`), then each finer
/// tier conditioned on the grid generated so far. If the stop rule shortens
/// tier 1 the finer tiers follow its length.
///
/// A prime in `options` is a full-resolution prefix. It is cut to a whole
/// number of schedule units, decomposed, and each tier is clamped to its
/// share of the prefix.
pub fn multiscale_sample(
    models: &[MelNet],
    schedule: &AxisSchedule,
    full: (usize, usize),
    first: &Conditioning,
    options: &SampleOptions,
    rng: &mut impl Rng,
) -> Result<MultiscaleSample> {
    check_models(models, schedule)?;
    let shapes = schedule.tier_shapes(full)?;
    for (g, (net, shape)) in models.iter().zip(&shapes).enumerate() {
        if net.config().channels != shape.1 {
            return Err(Error::CheckpointMismatch(format!(
                "tier {} model expects {} channels, schedule gives {}",
                g + 1,
                net.config().channels,
                shape.1
            )));
        }
    }
    let primes = match options.prime {
        Some(p) => {
            if p.ncols() != full.1 {
                return Err(Error::shape(format!("{} channels", full.1), format!("{} channels", p.ncols())));
            }
            if p.nrows() > full.0 {
                return Err(Error::InvalidArgument(format!(
                    "prime has {} frames but only {} were requested",
                    p.nrows(),
                    full.0
                )));
            }
            let dt = schedule.divisors().0;
            let usable = p.nrows() / dt * dt;
            if usable == 0 {
                None
            } else {
                Some(decompose(&p.slice(s![..usable, ..]).to_owned(), schedule)?)
            }
        }
        None => None,
    };
    let tier_options = |g: usize, stop: Option<f64>| SampleOptions {
        prime: primes.as_ref().map(|t| t.tier(g)),
        stop_threshold: stop,
        temperature: options.temperature,
    };
    let tier1 = models[0].sample(shapes[0].0, first, &tier_options(1, options.stop_threshold), rng)?;
    let mut acc = tier1.grid;
    for g in 2..=schedule.tiers() {
        let cond = Conditioning {
            context: Some(&acc),
            ..Default::default()
        };
        let x_g = models[g - 1].sample(acc.nrows(), &cond, &tier_options(g, None), rng)?.grid;
        acc = interleave(&x_g, &acc, schedule.axis(g))?;
    }
    Ok(MultiscaleSample {
        grid: acc,
        attention: tier1.attention,
        stopped_at: tier1.stopped_at,
    })
}
