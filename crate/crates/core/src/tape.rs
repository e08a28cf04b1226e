//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints, after which gradients of registered parameters can be read out
//! with [`Tape::gradients`].
//!
//! Besides the elementary matrix operations the tape offers a few fused
//! kernels (LSTM cell, Gaussian-mixture NLL, diagonal-Gaussian NLL, KL to a
//! standard normal, discretized logistic-mixture weights). Fusing keeps the
//! node count low for the long recurrent scans that dominate this crate.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{Gradients, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    Sum(Var),
    LstmCell {
        gates: Var,
        c_prev: Var,
    },
    GmmNll {
        theta: Var,
        target: Vec<f64>,
        k: usize,
    },
    GaussNll {
        mu: Var,
        log_sigma: Var,
        target: Array2<f64>,
    },
    KlStdNormal {
        mu: Var,
        log_sigma: Var,
    },
    LogisticMixtureMass {
        kappa: Var,
        beta: Var,
        alpha: Var,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Lower clamp on `ln σ` inside the fused Gaussian losses (σ ≥ 1e-8).
pub const MIN_LOG_SIGMA: f64 = -18.420_680_743_952_367;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant input. Receives an adjoint but is never read back.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable parameter. Repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() <= id.index() {
            self.params.resize(id.index() + 1, None);
        }
        if let Some(v) = self.params[id.index()] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `a [n × m] + row [1 × m]`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Output row `r` is input row `rows[r]`. Rows may repeat (broadcast).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        self.push(value, Op::GatherRows(a, rows))
    }

    /// Repeat a `[1 × m]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        self.gather_rows(a, vec![0; n])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Fused LSTM cell. `gates` holds pre-activations `[B × 4H]` in the order
    /// input, forget, candidate, output. Returns `(h, c)`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> (Var, Var) {
        let (b, four_h) = self.shape(gates);
        let h = four_h / 4;
        let mut out = Array2::zeros((b, 2 * h));
        {
            let g = self.value(gates);
            let cp = self.value(c_prev);
            for r in 0..b {
                for k in 0..h {
                    let i = sigmoid(g[[r, k]]);
                    let f = sigmoid(g[[r, h + k]]);
                    let cand = g[[r, 2 * h + k]].tanh();
                    let o = sigmoid(g[[r, 3 * h + k]]);
                    let c = f * cp[[r, k]] + i * cand;
                    out[[r, k]] = o * c.tanh();
                    out[[r, h + k]] = c;
                }
            }
        }
        let both = self.push(out, Op::LstmCell { gates, c_prev });
        let hv = self.slice_cols(both, 0, h);
        let cv = self.slice_cols(both, h, h);
        (hv, cv)
    }

    /// Summed negative log-likelihood of `target[n]` under the mixture whose
    /// unconstrained parameters are row `n` of `theta` (`[N × 3K]`, columns
    /// `μ̂ | σ̂ | π̂`).
    pub fn gmm_nll(&mut self, theta: Var, target: Vec<f64>, k: usize) -> Var {
        let th = self.value(theta);
        assert_eq!(th.ncols(), 3 * k, "gmm_nll: theta width");
        assert_eq!(th.nrows(), target.len(), "gmm_nll: target length");
        let mut total = 0.0;
        for (row, &x) in th.rows().into_iter().zip(&target) {
            total -= gmm_row_terms(&row.to_vec(), x, k).log_density;
        }
        self.push(Array2::from_elem((1, 1), total), Op::GmmNll { theta, target, k })
    }

    /// Summed elementwise NLL of `target` under `N(mu, exp(log_sigma)²)`.
    pub fn gauss_nll(&mut self, mu: Var, log_sigma: Var, target: Array2<f64>) -> Var {
        let mut total = 0.0;
        Zip::from(self.value(mu))
            .and(self.value(log_sigma))
            .and(&target)
            .for_each(|&m, &ls, &x| {
                let ls = ls.max(MIN_LOG_SIGMA);
                let z = (x - m) * (-ls).exp();
                total += HALF_LN_2PI + ls + 0.5 * z * z;
            });
        self.push(
            Array2::from_elem((1, 1), total),
            Op::GaussNll {
                mu,
                log_sigma,
                target,
            },
        )
    }

    /// Summed `KL(N(mu, σ²) ‖ N(0, 1))` over all elements.
    pub fn kl_std_normal(&mut self, mu: Var, log_sigma: Var) -> Var {
        let mut total = 0.0;
        Zip::from(self.value(mu))
            .and(self.value(log_sigma))
            .for_each(|&m, &ls| {
                total += 0.5 * (m * m + (2.0 * ls).exp() - 1.0) - ls;
            });
        self.push(Array2::from_elem((1, 1), total), Op::KlStdNormal { mu, log_sigma })
    }

    /// Discretized logistic-mixture masses. `kappa`, `beta`, `alpha` are
    /// `[1 × M]`; the result is `[1 × (U + 2)]` with columns
    /// `φ(1) … φ(U)`, then the left mass `F(0.5)`, then the survival
    /// `1 − F(U + 0.5)`.
    pub fn logistic_mixture_mass(&mut self, kappa: Var, beta: Var, alpha: Var, len: usize) -> Var {
        let value = {
            let k = self.value(kappa);
            let b = self.value(beta);
            let a = self.value(alpha);
            let mut out = Array2::zeros((1, len + 2));
            for m in 0..k.ncols() {
                let (km, bm, am) = (k[[0, m]], b[[0, m]], a[[0, m]]);
                let mut prev = sigmoid((0.5 - km) / bm);
                out[[0, len]] += am * prev;
                for u in 1..=len {
                    let next = sigmoid((u as f64 + 0.5 - km) / bm);
                    out[[0, u - 1]] += am * (next - prev);
                    prev = next;
                }
                out[[0, len + 1]] += am * (1.0 - prev);
            }
            out
        };
        self.push(value, Op::LogisticMixtureMass { kappa, beta, alpha })
    }

    /// Reverse sweep from a `1 × 1` output node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param | Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * &node.value),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        accumulate(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let w = g.ncols();
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        accumulate(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for ((mut dr, gr), yr) in d.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut dr).and(&gr).and(&yr).for_each(|d, &g, &y| *d = y * (g - dot));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, d);
                }
                Op::LstmCell { gates, c_prev } => {
                    let gv = self.value(*gates);
                    let cp = self.value(*c_prev);
                    let (b, four_h) = gv.dim();
                    let h = four_h / 4;
                    let mut dg = Array2::zeros((b, four_h));
                    let mut dcp = Array2::zeros((b, h));
                    for r in 0..b {
                        for k in 0..h {
                            let i = sigmoid(gv[[r, k]]);
                            let f = sigmoid(gv[[r, h + k]]);
                            let cand = gv[[r, 2 * h + k]].tanh();
                            let o = sigmoid(gv[[r, 3 * h + k]]);
                            let c = node.value[[r, h + k]];
                            let tc = c.tanh();
                            let dh = g[[r, k]];
                            let dc = g[[r, h + k]] + dh * o * (1.0 - tc * tc);
                            dg[[r, k]] = dc * cand * i * (1.0 - i);
                            dg[[r, h + k]] = dc * cp[[r, k]] * f * (1.0 - f);
                            dg[[r, 2 * h + k]] = dc * i * (1.0 - cand * cand);
                            dg[[r, 3 * h + k]] = dh * tc * o * (1.0 - o);
                            dcp[[r, k]] = dc * f;
                        }
                    }
                    accumulate(&mut grads, *gates, dg);
                    accumulate(&mut grads, *c_prev, dcp);
                }
                Op::GmmNll { theta, target, k } => {
                    let scale = g[[0, 0]];
                    let th = self.value(*theta);
                    let mut d = Array2::zeros(th.dim());
                    for ((row, mut drow), &x) in th.rows().into_iter().zip(d.rows_mut()).zip(target) {
                        let row = row.to_vec();
                        let terms = gmm_row_terms(&row, x, *k);
                        for c in 0..*k {
                            let r = terms.resp[c];
                            let z = terms.z[c];
                            drow[c] = -scale * r * z / terms.sigma[c];
                            if row[*k + c] > MIN_LOG_SIGMA {
                                drow[*k + c] = -scale * r * (z * z - 1.0);
                            }
                            drow[2 * *k + c] = scale * (terms.weight[c] - r);
                        }
                    }
                    accumulate(&mut grads, *theta, d);
                }
                Op::GaussNll {
                    mu,
                    log_sigma,
                    target,
                } => {
                    let scale = g[[0, 0]];
                    let mut dmu = Array2::zeros(target.dim());
                    let mut dls = Array2::zeros(target.dim());
                    Zip::from(&mut dmu)
                        .and(&mut dls)
                        .and(self.value(*mu))
                        .and(self.value(*log_sigma))
                        .and(target)
                        .for_each(|dm, dl, &m, &ls, &x| {
                            let clamped = ls.max(MIN_LOG_SIGMA);
                            let inv = (-clamped).exp();
                            let z = (x - m) * inv;
                            *dm = -scale * z * inv;
                            *dl = if ls > MIN_LOG_SIGMA { scale * (1.0 - z * z) } else { 0.0 };
                        });
                    accumulate(&mut grads, *mu, dmu);
                    accumulate(&mut grads, *log_sigma, dls);
                }
                Op::KlStdNormal { mu, log_sigma } => {
                    let scale = g[[0, 0]];
                    let dmu = self.value(*mu) * scale;
                    let dls = self.value(*log_sigma).mapv(|ls| scale * ((2.0 * ls).exp() - 1.0));
                    accumulate(&mut grads, *mu, dmu);
                    accumulate(&mut grads, *log_sigma, dls);
                }
                Op::LogisticMixtureMass { kappa, beta, alpha } => {
                    let kv = self.value(*kappa);
                    let bv = self.value(*beta);
                    let av = self.value(*alpha);
                    let len = g.ncols() - 2;
                    let m_count = kv.ncols();
                    let mut dk = Array2::zeros((1, m_count));
                    let mut db = Array2::zeros((1, m_count));
                    let mut da = Array2::zeros((1, m_count));
                    for m in 0..m_count {
                        let (km, bm, am) = (kv[[0, m]], bv[[0, m]], av[[0, m]]);
                        // Each output is a signed combination of CDF values
                        // s(v) = sigmoid((v - κ)/β) at v = u ± 0.5, so the
                        // adjoint of each s(v) collects from two outputs.
                        let mut acc_k = 0.0;
                        let mut acc_b = 0.0;
                        let mut acc_a = 0.0;
                        for e in 0..=len {
                            let v = e as f64 + 0.5;
                            // coefficient of s(v) in sum_out g_out * out
                            let upper = if e >= 1 { g[[0, e - 1]] } else { g[[0, len]] };
                            let lower = if e < len { g[[0, e]] } else { g[[0, len + 1]] };
                            let coef = upper - lower;
                            let a = (v - km) / bm;
                            let sv = sigmoid(a);
                            let ds = sv * (1.0 - sv);
                            acc_a += coef * sv;
                            acc_k += coef * am * ds * (-1.0 / bm);
                            acc_b += coef * am * ds * (-a / bm);
                        }
                        // survival term carries the constant α_m.
                        acc_a += g[[0, len + 1]];
                        dk[[0, m]] = acc_k;
                        db[[0, m]] = acc_b;
                        da[[0, m]] = acc_a;
                    }
                    accumulate(&mut grads, *kappa, dk);
                    accumulate(&mut grads, *beta, db);
                    accumulate(&mut grads, *alpha, da);
                }
            }
        }
        self.grads = grads;
    }

    /// Adjoint of any node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients after [`Tape::backward`]; unused parameters get zeros.
    pub fn gradients(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for (pid, slot) in self.params.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.grads.get(v.0).and_then(|g| g.as_ref()) {
                    out.values[pid] += g;
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) struct GmmRowTerms {
    pub log_density: f64,
    pub resp: Vec<f64>,
    pub weight: Vec<f64>,
    pub z: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Log-density and posterior responsibilities of one mixture row.
pub(crate) fn gmm_row_terms(row: &[f64], x: f64, k: usize) -> GmmRowTerms {
    let logits = &row[2 * k..3 * k];
    let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
    let mut joint = Vec::with_capacity(k);
    let mut z = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    let mut weight = Vec::with_capacity(k);
    for c in 0..k {
        let ls = row[k + c].max(MIN_LOG_SIGMA);
        let s = ls.exp();
        let zc = (x - row[c]) / s;
        let log_pi = logits[c] - lz;
        joint.push(log_pi - HALF_LN_2PI - ls - 0.5 * zc * zc);
        z.push(zc);
        sigma.push(s);
        weight.push(log_pi.exp());
    }
    let jmax = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = joint.iter().map(|j| (j - jmax).exp()).sum();
    let log_density = jmax + sum.ln();
    let resp = joint.iter().map(|j| (j - log_density).exp()).collect();
    GmmRowTerms {
        log_density,
        resp,
        weight,
        z,
        sigma,
    }
}
