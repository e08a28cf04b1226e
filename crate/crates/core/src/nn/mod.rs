//! Recurrent building blocks shared by the fine-grained network, the text
//! encoder and the frame-level baselines.

mod layers;

pub use layers::{CentralizedLayer, FeatureExtractor, FrequencyDelayedLayer, MdRnnLayer};

use std::ops::{Deref, DerefMut};

use ndarray::Array2;
use rand::Rng;

use crate::params::{orthogonal, uniform_init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// A tape bound to the parameter store it reads from.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

impl Deref for Ctx<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Ctx<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// `x·W (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, input, output));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, output))));
        Self { weight, bias }
    }

    pub fn apply(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(self.weight);
        let y = cx.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = cx.p(b);
                cx.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Recurrent state `(h, c)`.
pub type LstmState = (Var, Var);

/// LSTM with trainable initial state. Gate order: input, forget,
/// candidate, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub hidden: usize,
    w_in: ParamId,
    w_rec: ParamId,
    bias: ParamId,
    h0: ParamId,
    c0: ParamId,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize) -> Self {
        let w_in = store.add(format!("{name}.w_in"), uniform_init(rng, input, 4 * hidden));
        let mut rec = Array2::zeros((hidden, 4 * hidden));
        for g in 0..4 {
            let q = orthogonal(rng, hidden);
            rec.slice_mut(ndarray::s![.., g * hidden..(g + 1) * hidden]).assign(&q);
        }
        let w_rec = store.add(format!("{name}.w_rec"), rec);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, 4 * hidden)));
        let h0 = store.add(format!("{name}.h0"), Array2::zeros((1, hidden)));
        let c0 = store.add(format!("{name}.c0"), Array2::zeros((1, hidden)));
        Self {
            hidden,
            w_in,
            w_rec,
            bias,
            h0,
            c0,
        }
    }

    /// Input contribution to the gates for every row of `x`.
    pub fn input_gates(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(self.w_in);
        let b = cx.p(self.bias);
        let g = cx.matmul(x, w);
        cx.add_row(g, b)
    }

    pub fn initial(&self, cx: &mut Ctx, batch: usize) -> LstmState {
        let h0 = cx.p(self.h0);
        let c0 = cx.p(self.c0);
        (cx.broadcast_rows(h0, batch), cx.broadcast_rows(c0, batch))
    }

    pub fn step(&self, cx: &mut Ctx, gates_in: Var, state: LstmState) -> LstmState {
        let w = cx.p(self.w_rec);
        let rec = cx.matmul(state.0, w);
        let gates = cx.add(gates_in, rec);
        cx.lstm_cell(gates, state.1)
    }

    /// Runs the recurrence over `steps`, where `steps[s]` lists the rows of
    /// `gates_all` processed (as one batch) at step `s`. Every row must appear
    /// exactly once. Returns hidden states in row order and the final state.
    pub fn scan(&self, cx: &mut Ctx, gates_all: Var, steps: &[Vec<usize>], init: Option<LstmState>) -> (Var, LstmState) {
        let batch = steps[0].len();
        let mut state = init.unwrap_or_else(|| self.initial(cx, batch));
        let mut outs = Vec::with_capacity(steps.len());
        for rows in steps {
            let g = cx.gather_rows(gates_all, rows.clone());
            state = self.step(cx, g, state);
            outs.push(state.0);
        }
        let stacked = cx.concat_rows(&outs);
        let total: usize = steps.iter().map(Vec::len).sum();
        let mut position = vec![usize::MAX; total];
        for (flat, &row) in steps.iter().flatten().enumerate() {
            position[row] = flat;
        }
        debug_assert!(position.iter().all(|&p| p != usize::MAX));
        let identity = position.iter().enumerate().all(|(i, &p)| i == p);
        let out = if identity { stacked } else { cx.gather_rows(stacked, position) };
        (out, state)
    }
}

/// Row indexing for a `[T × M]` grid flattened time-major into `T·M` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub frames: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    FreqForward,
    FreqBackward,
    TimeForward,
    TimeBackward,
}

impl Geometry {
    pub fn new(frames: usize, channels: usize) -> Self {
        Self { frames, channels }
    }

    pub fn rows(&self) -> usize {
        self.frames * self.channels
    }

    pub fn row(&self, i: usize, j: usize) -> usize {
        i * self.channels + j
    }

    /// Batches for a scan in `dir`: along frequency each step holds one
    /// channel of every frame, along time one frame of every channel.
    pub fn steps(&self, dir: Direction) -> Vec<Vec<usize>> {
        let (t, m) = (self.frames, self.channels);
        match dir {
            Direction::FreqForward => (0..m).map(|j| (0..t).map(|i| i * m + j).collect()).collect(),
            Direction::FreqBackward => (0..m).rev().map(|j| (0..t).map(|i| i * m + j).collect()).collect(),
            Direction::TimeForward => (0..t).map(|i| (0..m).map(|j| i * m + j).collect()).collect(),
            Direction::TimeBackward => (0..t).rev().map(|i| (0..m).map(|j| i * m + j).collect()).collect(),
        }
    }

    /// Maps every grid row to its frame index (broadcast of per-frame rows).
    pub fn frame_of_row(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| r / self.channels).collect()
    }
}

/// Sequential steps `[[0], [1], …]` for a single sequence of length `n`.
pub fn sequence_steps(n: usize, reverse: bool) -> Vec<Vec<usize>> {
    if reverse {
        (0..n).rev().map(|i| vec![i]).collect()
    } else {
        (0..n).map(|i| vec![i]).collect()
    }
}
