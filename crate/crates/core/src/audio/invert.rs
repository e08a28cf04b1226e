//! Spectrogram inversion: mel → linear magnitude, Griffin-Lim phase
//! recovery, and gradient descent on samples against a log-mel target.

use log::warn;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::{build_mel_filterbank, log_mel_from_power, MelSpectrogram, Stft, Waveform};
use crate::{Error, Result};

/// Recover a non-negative power spectrogram `[T × bins]` whose mel projection
/// best matches `exp(x)` in the least-squares sense. Projected gradient
/// starting from the clipped pseudo-inverse; the pseudo-inverse is kept if
/// the iteration fails to improve on it.
pub fn unmel(x: &MelSpectrogram, iterations: usize) -> Result<Array2<f64>> {
    let fb = build_mel_filterbank(&x.config)?;
    let (m, bins) = fb.dim();
    let target = x.values.mapv(f64::exp);

    let fb_na = DMatrix::from_fn(m, bins, |r, c| fb[[r, c]]);
    let pinv = fb_na
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::NonFinite(format!("mel pseudo-inverse: {e}")))?;
    let pinv = Array2::from_shape_fn((bins, m), |(r, c)| pinv[(r, c)]);

    let gram = fb.t().dot(&fb);
    let lipschitz = largest_eigenvalue(&gram).max(1e-12);

    let mut out = Array2::zeros((x.frames(), bins));
    for (t, frame) in target.rows().into_iter().enumerate() {
        let frame = frame.to_owned();
        let init = pinv.dot(&frame).mapv(|v| v.max(0.0));
        let residual = |p: &Array1<f64>| (fb.dot(p) - &frame).mapv(|v| v * v).sum();
        let mut p = init.clone();
        for _ in 0..iterations {
            let grad = fb.t().dot(&(fb.dot(&p) - &frame));
            p.scaled_add(-1.0 / lipschitz, &grad);
            p.mapv_inplace(|v| v.max(0.0));
        }
        let chosen = if p.iter().all(|v| v.is_finite()) && residual(&p) <= residual(&init) {
            p
        } else {
            init
        };
        out.row_mut(t).assign(&chosen);
    }
    Ok(out)
}

fn largest_eigenvalue(sym: &Array2<f64>) -> f64 {
    let n = sym.nrows();
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = sym.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda
}

#[derive(Debug, Clone)]
pub struct GriffinLimOptions {
    pub iterations: usize,
    /// Seeded uniform random initial phase instead of zero phase.
    pub random_phase_seed: Option<u64>,
    pub unmel_iterations: usize,
}

impl Default for GriffinLimOptions {
    fn default() -> Self {
        Self {
            iterations: 50,
            random_phase_seed: None,
            unmel_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GriffinLim {
    pub waveform: Waveform,
    /// Spectral convergence after 0, 1, …, `iterations` phase updates.
    pub errors: Vec<f64>,
    /// Set when the target carried no energy; the output is silence.
    pub degenerate: bool,
}

/// Two-sided spectral convergence `‖|S| − A‖ / ‖A‖`.
fn spectral_convergence(stft: &Stft, spec: &Array2<Complex64>, target: &Array2<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((t, b), &a) in target.indexed_iter() {
        let w = stft.two_sided_weight(b);
        let d = spec[[t, b]].norm() - a;
        num += w * d * d;
        den += w * a * a;
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

pub fn invert_griffin_lim(x: &MelSpectrogram, opts: &GriffinLimOptions) -> Result<GriffinLim> {
    let config = &x.config;
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectrogram to invert".into()));
    }
    let n = x.frames() * config.hop;
    let floor = config.log_floor_ln();
    if x.values.iter().all(|&v| v <= floor) {
        warn!("griffin-lim: all-floor spectrogram, returning silence");
        return Ok(GriffinLim {
            waveform: Waveform::new(vec![0.0; n], config.sample_rate)?,
            errors: vec![0.0; opts.iterations + 1],
            degenerate: true,
        });
    }
    let magnitude = unmel(x, opts.unmel_iterations)?.mapv(f64::sqrt);
    let stft = Stft::new(config);

    let mut phase: Array2<Complex64> = match opts.random_phase_seed {
        None => Array2::from_elem(magnitude.dim(), Complex64::new(1.0, 0.0)),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_fn(magnitude.dim(), |_| {
                Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))
            })
        }
    };

    let apply = |phase: &Array2<Complex64>| {
        let spec = ndarray::Zip::from(phase)
            .and(&magnitude)
            .map_collect(|&p, &a| p * a);
        stft.inverse_ls(&spec, n)
    };

    let mut y = apply(&phase);
    let mut spec = stft.spectrum(&y);
    let mut errors = vec![spectral_convergence(&stft, &spec, &magnitude)];
    for _ in 0..opts.iterations {
        phase = spec.mapv(|c| {
            let r = c.norm();
            if r > 0.0 {
                c / r
            } else {
                Complex64::new(1.0, 0.0)
            }
        });
        y = apply(&phase);
        spec = stft.spectrum(&y);
        errors.push(spectral_convergence(&stft, &spec, &magnitude));
    }
    Ok(GriffinLim {
        waveform: Waveform::new(y, config.sample_rate)?,
        errors,
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub struct GradientInversionOptions {
    pub steps: usize,
    pub step_size: f64,
    pub griffin_lim: GriffinLimOptions,
}

impl Default for GradientInversionOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: 1e-2,
            griffin_lim: GriffinLimOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientInversion {
    pub waveform: Waveform,
    /// Log-mel MSE before the first step and after every accepted step.
    pub losses: Vec<f64>,
}

/// Mean squared log-mel error of `y` against `x` and its gradient.
pub fn log_mel_mse(
    stft: &Stft,
    fb: &Array2<f64>,
    x: &MelSpectrogram,
    y: &[f64],
    with_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let spec = stft.spectrum(y);
    let power = spec.mapv(|c| c.norm_sqr());
    let mel = power.dot(&fb.t());
    let floor = x.config.log_floor;
    let logmel = log_mel_from_power(&power, fb, floor);
    let count = x.values.len() as f64;
    let diff = &logmel - &x.values;
    let loss = diff.mapv(|d| d * d).sum() / count;
    if !with_grad {
        return (loss, None);
    }
    // dL/dmel = 2(x̂ − x)/(N·mel), zero where the floor is active.
    let dmel = ndarray::Zip::from(&diff)
        .and(&mel)
        .map_collect(|&d, &m| if m > floor { 2.0 * d / (count * m) } else { 0.0 });
    let dpower = dmel.dot(fb);
    (loss, Some(stft.power_adjoint(&spec, &dpower, y.len())))
}

/// Gradient descent on the samples of `init` (or the Griffin-Lim output when
/// `init` is `None`) against the log-mel MSE. A step that raises the loss is
/// rejected and the step size halved.
pub fn invert_gradient_based(
    x: &MelSpectrogram,
    init: Option<&Waveform>,
    opts: &GradientInversionOptions,
) -> Result<GradientInversion> {
    let config = &x.config;
    let start = match init {
        Some(w) => {
            if w.sample_rate != config.sample_rate {
                return Err(Error::InvalidArgument(format!(
                    "init sample rate {} does not match {}",
                    w.sample_rate, config.sample_rate
                )));
            }
            w.clone()
        }
        None => invert_griffin_lim(x, &opts.griffin_lim)?.waveform,
    };
    if super::frame_count(start.len(), config.hop) != x.frames() {
        return Err(Error::shape(
            format!("{} frames", x.frames()),
            format!("{} samples", start.len()),
        ));
    }
    let stft = Stft::new(config);
    let fb = build_mel_filterbank(config)?;
    let mut y = start.samples;
    let (mut loss, mut grad) = log_mel_mse(&stft, &fb, x, &y, true);
    if !loss.is_finite() {
        return Err(Error::NonFinite("initial inversion loss".into()));
    }
    let mut losses = vec![loss];
    let mut step = opts.step_size;
    for _ in 0..opts.steps {
        if loss == 0.0 {
            break;
        }
        let g = grad.as_ref().expect("gradient requested");
        let mut accepted = false;
        for _ in 0..40 {
            let candidate: Vec<f64> = y.iter().zip(g).map(|(a, b)| a - step * b).collect();
            let (c_loss, _) = log_mel_mse(&stft, &fb, x, &candidate, false);
            if !c_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "inversion loss at step size {step:e}; lower the step size"
                )));
            }
            if c_loss <= loss {
                y = candidate;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let (l, gr) = log_mel_mse(&stft, &fb, x, &y, true);
        loss = l;
        grad = gr;
        losses.push(loss);
    }
    Ok(GradientInversion {
        waveform: Waveform::new(y, config.sample_rate)?,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{compute_melspectrogram, SpectrogramConfig};
    use crate::corpus::synth_voiced_clip;

    fn cfg() -> SpectrogramConfig {
        SpectrogramConfig::new(8000, 64, 32).unwrap()
    }

    #[test]
    fn all_floor_inverts_to_silence_and_back() {
        let c = cfg();
        let x = MelSpectrogram::new(Array2::from_elem((20, 32), c.log_floor.ln()), c.clone()).unwrap();
        let gl = invert_griffin_lim(&x, &GriffinLimOptions::default()).unwrap();
        assert!(gl.degenerate);
        assert!(gl.waveform.peak() < 1e-3);
        let again = compute_melspectrogram(&gl.waveform, &c).unwrap();
        assert_eq!(again.values.dim(), x.values.dim());
        for (a, b) in again.values.iter().zip(x.values.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_iterations_is_deterministic() {
        let c = cfg();
        let y = synth_voiced_clip(&c, 0.25, 3);
        let x = compute_melspectrogram(&y, &c).unwrap();
        let opts = GriffinLimOptions {
            iterations: 0,
            ..Default::default()
        };
        let a = invert_griffin_lim(&x, &opts).unwrap();
        let b = invert_griffin_lim(&x, &opts).unwrap();
        assert_eq!(a.waveform, b.waveform);
        assert_eq!(a.errors.len(), 1);
    }

    #[test]
    fn griffin_lim_error_never_increases() {
        let c = cfg();
        let y = synth_voiced_clip(&c, 0.3, 5);
        let x = compute_melspectrogram(&y, &c).unwrap();
        for seed in [None, Some(7)] {
            let gl = invert_griffin_lim(
                &x,
                &GriffinLimOptions {
                    iterations: 20,
                    random_phase_seed: seed,
                    ..Default::default()
                },
            )
            .unwrap();
            for w in gl.errors.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", gl.errors);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = SpectrogramConfig::new(8000, 32, 8).unwrap();
        let y = synth_voiced_clip(&c, 0.02, 1);
        let x = compute_melspectrogram(&y, &c).unwrap();
        let stft = Stft::new(&c);
        let fb = build_mel_filterbank(&c).unwrap();
        let z: Vec<f64> = y.samples.iter().enumerate().map(|(i, s)| s * 0.8 + 0.01 * ((i % 5) as f64 - 2.0)).collect();
        let (_, g) = log_mel_mse(&stft, &fb, &x, &z, true);
        let g = g.unwrap();
        for idx in [0usize, 13, 70, z.len() - 1] {
            let eps = 1e-6;
            let mut up = z.clone();
            up[idx] += eps;
            let mut dn = z.clone();
            dn[idx] -= eps;
            let num = (log_mel_mse(&stft, &fb, &x, &up, false).0 - log_mel_mse(&stft, &fb, &x, &dn, false).0) / (2.0 * eps);
            assert!((num - g[idx]).abs() < 1e-5 * (1.0 + num.abs()), "{idx}: {num} vs {}", g[idx]);
        }
    }

    #[test]
    fn exact_init_is_a_fixed_point() {
        let c = cfg();
        let y = synth_voiced_clip(&c, 0.2, 2);
        let x = compute_melspectrogram(&y, &c).unwrap();
        let out = invert_gradient_based(&x, Some(&y), &GradientInversionOptions::default()).unwrap();
        assert_eq!(out.losses[0], 0.0);
        assert_eq!(out.waveform, y);
    }

    #[test]
    fn zero_steps_returns_init() {
        let c = cfg();
        let y = synth_voiced_clip(&c, 0.2, 2);
        let x = compute_melspectrogram(&y, &c).unwrap();
        let init = Waveform::new(y.samples.iter().map(|s| s * 0.5).collect(), y.sample_rate).unwrap();
        let opts = GradientInversionOptions {
            steps: 0,
            ..Default::default()
        };
        let out = invert_gradient_based(&x, Some(&init), &opts).unwrap();
        assert_eq!(out.waveform, init);
        let wrong = Waveform::new(init.samples.clone(), 16000).unwrap();
        assert!(invert_gradient_based(&x, Some(&wrong), &opts).is_err());
    }

    #[test]
    fn unmel_reprojects_close_to_target() {
        let c = cfg();
        let y = synth_voiced_clip(&c, 0.2, 4);
        let x = compute_melspectrogram(&y, &c).unwrap();
        let p = unmel(&x, 300).unwrap();
        assert!(p.iter().all(|&v| v >= 0.0));
        let fb = build_mel_filterbank(&c).unwrap();
        let back = log_mel_from_power(&p, &fb, c.log_floor);
        let err = (&back - &x.values).mapv(f64::abs);
        let mean = err.sum() / err.len() as f64;
        assert!(mean < 0.5, "mean abs log error {mean}");
    }
}
