use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::SpectrogramConfig;

/// Number of frames for `n` samples: `⌈n / hop⌉`.
pub fn frame_count(n: usize, hop: usize) -> usize {
    n.div_ceil(hop)
}

/// Mirror an index into `[0, n)` by repeated reflection about the end
/// samples (no edge repeat), so any padding width works for any `n ≥ 1`.
fn mirror(q: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = q.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Centered short-time Fourier transform with a periodic Hann window
/// zero-padded to `fft_size`. Frame `t` is centered on sample `t·hop`, with
/// reflection padding of `fft_size/2` at both ends.
pub struct Stft {
    hop: usize,
    fft_size: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: &SpectrogramConfig) -> Self {
        let n = config.fft_size;
        let w = config.window;
        let offset = (n - w) / 2;
        let mut window = vec![0.0; n];
        for k in 0..w {
            window[offset + k] = 0.5 - 0.5 * (2.0 * PI * k as f64 / w as f64).cos();
        }
        let mut planner = FftPlanner::new();
        Self {
            hop: config.hop,
            fft_size: n,
            window,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    fn source_index(&self, t: usize, k: usize, n: usize) -> usize {
        let p = (t * self.hop + k) as isize - (self.fft_size / 2) as isize;
        mirror(p, n)
    }

    /// One-sided complex spectrum, `[T × (fft_size/2 + 1)]`.
    pub fn spectrum(&self, y: &[f64]) -> Array2<Complex64> {
        let n = y.len();
        let frames = frame_count(n, self.hop);
        let bins = self.bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        for t in 0..frames {
            for k in 0..self.fft_size {
                buf[k] = Complex64::new(self.window[k] * y[self.source_index(t, k, n)], 0.0);
            }
            self.forward.process(&mut buf);
            for b in 0..bins {
                out[[t, b]] = buf[b];
            }
        }
        out
    }

    pub fn power(&self, y: &[f64]) -> Array2<f64> {
        self.spectrum(y).mapv(|c| c.norm_sqr())
    }

    /// Least-squares inverse of [`Stft::spectrum`] for a signal of length
    /// `n`: the real `y` minimizing the two-sided distance between its STFT
    /// and `spec` (Hermitian-extended).
    pub fn inverse_ls(&self, spec: &Array2<Complex64>, n: usize) -> Vec<f64> {
        let frames = spec.nrows();
        let size = self.fft_size;
        let mut num = vec![0.0; n];
        let mut den = vec![0.0; n];
        let mut buf = vec![Complex64::new(0.0, 0.0); size];
        for t in 0..frames {
            self.hermitian_fill(spec, t, &mut buf);
            self.inverse.process(&mut buf);
            for k in 0..size {
                let w = self.window[k];
                if w == 0.0 {
                    continue;
                }
                let idx = self.source_index(t, k, n);
                num[idx] += w * buf[k].re / size as f64;
                den[idx] += w * w;
            }
        }
        num.iter()
            .zip(&den)
            .map(|(&a, &d)| if d > 1e-12 { a / d } else { 0.0 })
            .collect()
    }

    fn hermitian_fill(&self, spec: &Array2<Complex64>, t: usize, buf: &mut [Complex64]) {
        let size = self.fft_size;
        for b in 0..self.bins() {
            buf[b] = spec[[t, b]];
        }
        for b in self.bins()..size {
            buf[b] = spec[[t, size - b]].conj();
        }
        // DC and Nyquist of a real signal carry no imaginary part.
        buf[0].im = 0.0;
        buf[size / 2].im = 0.0;
    }

    /// Gradient of `Σ_{t,b} G[t,b]·|S[t,b]|²` with respect to the samples,
    /// given the spectrum `S` of `y`.
    pub fn power_adjoint(&self, spec: &Array2<Complex64>, g: &Array2<f64>, n: usize) -> Vec<f64> {
        let size = self.fft_size;
        let bins = self.bins();
        let mut out = vec![0.0; n];
        let mut buf = vec![Complex64::new(0.0, 0.0); size];
        for t in 0..spec.nrows() {
            for b in 0..size {
                buf[b] = if b < bins {
                    spec[[t, b]].conj() * g[[t, b]]
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            // ∂|S_b|²/∂frame[k] = 2·Re(conj(S_b)·e^{-2πibk/N}); the sum over b
            // is a forward DFT of conj(S)·G.
            self.forward.process(&mut buf);
            for k in 0..size {
                let w = self.window[k];
                if w == 0.0 {
                    continue;
                }
                out[self.source_index(t, k, n)] += 2.0 * w * buf[k].re;
            }
        }
        out
    }

    /// Frobenius norm over the two-sided spectrum: interior bins count twice.
    pub(crate) fn two_sided_weight(&self, b: usize) -> f64 {
        if b == 0 || b == self.fft_size / 2 {
            1.0
        } else {
            2.0
        }
    }
}
