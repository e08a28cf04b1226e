use ndarray::Array2;
use rand::Rng;

use super::{sequence_steps, Ctx, Direction, Geometry, Lstm, LstmState};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tape::Var;

/// One residual layer of one-dimensional RNNs running along grid slices,
/// with their hidden states concatenated and projected back to `H`.
///
/// With directions {freq→, freq←, time→} this is a time-delayed stack layer;
/// adding time← gives a non-causal feature-extraction layer.
#[derive(Debug, Clone)]
pub struct MdRnnLayer {
    rnns: Vec<(Direction, Lstm)>,
    proj: ParamId,
}

impl MdRnnLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, hidden: usize, dirs: &[Direction]) -> Self {
        let rnns = dirs
            .iter()
            .map(|&d| {
                let tag = match d {
                    Direction::FreqForward => "freq_fwd",
                    Direction::FreqBackward => "freq_bwd",
                    Direction::TimeForward => "time_fwd",
                    Direction::TimeBackward => "time_bwd",
                };
                (d, Lstm::new(store, rng, &format!("{name}.{tag}"), hidden, hidden))
            })
            .collect::<Vec<_>>();
        let proj = store.add(format!("{name}.proj"), uniform_init(rng, dirs.len() * hidden, hidden));
        Self { rnns, proj }
    }

    pub fn proj(&self) -> ParamId {
        self.proj
    }

    /// `time_state` seeds the forward-in-time RNN, which lets a caller feed
    /// the grid one frame at a time. The final forward-time state is returned.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        input: Var,
        geom: Geometry,
        time_state: Option<LstmState>,
    ) -> (Var, Option<LstmState>) {
        let mut outs = Vec::with_capacity(self.rnns.len());
        let mut final_time = None;
        for (dir, lstm) in &self.rnns {
            let gates = lstm.input_gates(cx, input);
            let init = if *dir == Direction::TimeForward { time_state } else { None };
            let (h, last) = lstm.scan(cx, gates, &geom.steps(*dir), init);
            if *dir == Direction::TimeForward {
                final_time = Some(last);
            }
            outs.push(h);
        }
        let cat = cx.concat_cols(&outs);
        let w = cx.p(self.proj);
        let y = cx.matmul(cat, w);
        (cx.add(y, input), final_time)
    }
}

/// Residual layer with a single RNN running forward along frequency over
/// the sum of its inputs.
#[derive(Debug, Clone)]
pub struct FrequencyDelayedLayer {
    rnn: Lstm,
    proj: ParamId,
}

impl FrequencyDelayedLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, hidden: usize) -> Self {
        let rnn = Lstm::new(store, rng, &format!("{name}.freq_fwd"), hidden, hidden);
        let proj = store.add(format!("{name}.proj"), uniform_init(rng, hidden, hidden));
        Self { rnn, proj }
    }

    pub fn proj(&self) -> ParamId {
        self.proj
    }

    fn summed(cx: &mut Ctx, prev: Var, time: Var, central: Option<Var>) -> Var {
        let s = cx.add(prev, time);
        match central {
            Some(c) => cx.add(s, c),
            None => s,
        }
    }

    /// `central` must already be broadcast to one row per grid element.
    pub fn forward(&self, cx: &mut Ctx, prev: Var, time: Var, central: Option<Var>, geom: Geometry) -> Var {
        let input = Self::summed(cx, prev, time, central);
        let gates = self.rnn.input_gates(cx, input);
        let (h, _) = self.rnn.scan(cx, gates, &geom.steps(Direction::FreqForward), None);
        let w = cx.p(self.proj);
        let y = cx.matmul(h, w);
        cx.add(y, prev)
    }

    pub fn initial(&self, cx: &mut Ctx) -> LstmState {
        self.rnn.initial(cx, 1)
    }

    /// Single element update for incremental sampling.
    pub fn step(&self, cx: &mut Ctx, prev: Var, time: Var, central: Option<Var>, state: LstmState) -> (Var, LstmState) {
        let input = Self::summed(cx, prev, time, central);
        let gates = self.rnn.input_gates(cx, input);
        let state = self.rnn.step(cx, gates, state);
        let w = cx.p(self.proj);
        let y = cx.matmul(state.0, w);
        (cx.add(y, prev), state)
    }
}

/// Residual layer with an RNN over whole-frame vectors, forward in time.
#[derive(Debug, Clone)]
pub struct CentralizedLayer {
    rnn: Lstm,
    proj: ParamId,
}

impl CentralizedLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, hidden: usize) -> Self {
        let rnn = Lstm::new(store, rng, &format!("{name}.time_fwd"), hidden, hidden);
        let proj = store.add(format!("{name}.proj"), uniform_init(rng, hidden, hidden));
        Self { rnn, proj }
    }

    pub fn proj(&self) -> ParamId {
        self.proj
    }

    pub fn forward(&self, cx: &mut Ctx, prev: Var) -> Var {
        let frames = cx.shape(prev).0;
        let gates = self.rnn.input_gates(cx, prev);
        let (h, _) = self.rnn.scan(cx, gates, &sequence_steps(frames, false), None);
        let w = cx.p(self.proj);
        let y = cx.matmul(h, w);
        cx.add(y, prev)
    }

    pub fn initial(&self, cx: &mut Ctx) -> LstmState {
        self.rnn.initial(cx, 1)
    }

    pub fn step(&self, cx: &mut Ctx, prev: Var, state: LstmState) -> (Var, LstmState) {
        let gates = self.rnn.input_gates(cx, prev);
        let state = self.rnn.step(cx, gates, state);
        let w = cx.p(self.proj);
        let y = cx.matmul(state.0, w);
        (cx.add(y, prev), state)
    }
}

/// Non-causal multidimensional RNN over the interleaved lower tiers. Its
/// output has one `H`-vector per element of the context grid, which has the
/// same shape as the tier being generated.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    input: ParamId,
    layers: Vec<MdRnnLayer>,
}

const ALL_DIRECTIONS: [Direction; 4] = [
    Direction::FreqForward,
    Direction::FreqBackward,
    Direction::TimeForward,
    Direction::TimeBackward,
];

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, hidden: usize, layers: usize) -> Self {
        let input = store.add(format!("{name}.input"), uniform_init(rng, 1, hidden));
        let layers = (0..layers)
            .map(|l| MdRnnLayer::new(store, rng, &format!("{name}.layer{}", l + 1), hidden, &ALL_DIRECTIONS))
            .collect();
        Self { input, layers }
    }

    pub fn forward(&self, cx: &mut Ctx, context: &Array2<f64>) -> Var {
        let geom = Geometry::new(context.nrows(), context.ncols());
        let col = context
            .to_owned()
            .into_shape_with_order((geom.rows(), 1))
            .expect("contiguous context grid");
        let x = cx.constant(col);
        let w = cx.p(self.input);
        let mut h = cx.matmul(x, w);
        for layer in &self.layers {
            h = layer.forward(cx, h, geom, None).0;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn zero_params(store: &mut ParamStore) {
        for v in store.values_mut() {
            v.fill(0.0);
        }
    }

    const TD: [Direction; 3] = [Direction::FreqForward, Direction::FreqBackward, Direction::TimeForward];

    fn td_out(store: &ParamStore, layer: &MdRnnLayer, input: &Array2<f64>, geom: Geometry) -> Array2<f64> {
        let mut cx = Ctx::new(store);
        let x = cx.constant(input.clone());
        let (y, _) = layer.forward(&mut cx, x, geom, None);
        cx.value(y).clone()
    }

    #[test]
    fn time_delayed_shape_and_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = MdRnnLayer::new(&mut store, &mut rng, "td", 4, &TD);
        let geom = Geometry::new(3, 5);
        let out = td_out(&store, &layer, &random_grid(&mut rng, 15, 4), geom);
        assert_eq!(out.dim(), (15, 4));

        zero_params(&mut store);
        let out = td_out(&store, &layer, &Array2::zeros((15, 4)), geom);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_delayed_is_causal_in_time_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = MdRnnLayer::new(&mut store, &mut rng, "td", 4, &TD);
        let geom = Geometry::new(4, 3);
        let input = random_grid(&mut rng, 12, 4);
        let base = td_out(&store, &layer, &input, geom);
        for i_p in 0..4 {
            for j_p in 0..3 {
                let mut pert = input.clone();
                pert[[geom.row(i_p, j_p), 0]] += 0.5;
                let out = td_out(&store, &layer, &pert, geom);
                for i in 0..4 {
                    let changed = (0..3).any(|j| (0..4).any(|k| out[[geom.row(i, j), k]] != base[[geom.row(i, j), k]]));
                    if i < i_p {
                        assert!(!changed, "row {i} changed after perturbing ({i_p},{j_p})");
                    }
                }
                // Bidirectional frequency RNNs: the whole perturbed row moves.
                for j in 0..3 {
                    let r = geom.row(i_p, j);
                    assert!((0..4).any(|k| out[[r, k]] != base[[r, k]]));
                }
            }
        }
    }

    #[test]
    fn residual_identity_with_zero_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = MdRnnLayer::new(&mut store, &mut rng, "td", 4, &TD);
        let fd = FrequencyDelayedLayer::new(&mut store, &mut rng, "fd", 4);
        let c = CentralizedLayer::new(&mut store, &mut rng, "c", 4);
        store.get_mut(layer.proj()).fill(0.0);
        store.get_mut(fd.proj()).fill(0.0);
        store.get_mut(c.proj()).fill(0.0);
        let geom = Geometry::new(3, 2);
        let input = random_grid(&mut rng, 6, 4);
        assert_eq!(td_out(&store, &layer, &input, geom), input);

        let mut cx = Ctx::new(&store);
        let prev = cx.constant(input.clone());
        let t = cx.constant(random_grid(&mut rng, 6, 4));
        let y = fd.forward(&mut cx, prev, t, None, geom);
        assert_eq!(cx.value(y), &input);

        let frames = random_grid(&mut rng, 3, 4);
        let prev = cx.constant(frames.clone());
        let y = c.forward(&mut cx, prev);
        assert_eq!(cx.value(y), &frames);
    }

    #[test]
    fn frequency_delayed_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let fd = FrequencyDelayedLayer::new(&mut store, &mut rng, "fd", 3);
        let geom = Geometry::new(2, 4);
        let prev = random_grid(&mut rng, 8, 3);
        let time = random_grid(&mut rng, 8, 3);
        let central = random_grid(&mut rng, 2, 3);
        let run = |prev: &Array2<f64>, central: &Array2<f64>| {
            let mut cx = Ctx::new(&store);
            let p = cx.constant(prev.clone());
            let t = cx.constant(time.clone());
            let c = cx.constant(central.clone());
            let cb = cx.gather_rows(c, geom.frame_of_row());
            let y = fd.forward(&mut cx, p, t, Some(cb), geom);
            cx.value(y).clone()
        };
        let base = run(&prev, &central);
        assert_eq!(base.dim(), (8, 3));
        for j_p in 0..4 {
            let mut pert = prev.clone();
            pert[[geom.row(1, j_p), 1]] += 1.0;
            let out = run(&pert, &central);
            for j in 0..j_p {
                assert_eq!(out.row(geom.row(1, j)), base.row(geom.row(1, j)));
            }
            // other frame untouched
            for j in 0..4 {
                assert_eq!(out.row(geom.row(0, j)), base.row(geom.row(0, j)));
            }
        }
        let mut shifted = central.clone();
        for k in 0..3 {
            shifted[[1, k]] += 0.3;
        }
        let out = run(&prev, &shifted);
        for j in 0..4 {
            assert_eq!(out.row(geom.row(0, j)), base.row(geom.row(0, j)));
            assert_ne!(out.row(geom.row(1, j)), base.row(geom.row(1, j)));
        }
    }

    #[test]
    fn centralized_causality_and_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let c = CentralizedLayer::new(&mut store, &mut rng, "c", 3);
        let input = random_grid(&mut rng, 5, 3);
        let run = |store: &ParamStore, x: &Array2<f64>| {
            let mut cx = Ctx::new(store);
            let v = cx.constant(x.clone());
            let y = c.forward(&mut cx, v);
            cx.value(y).clone()
        };
        let base = run(&store, &input);
        assert_eq!(base.dim(), (5, 3));
        let mut pert = input.clone();
        pert[[3, 0]] += 1.0;
        let out = run(&store, &pert);
        for i in 0..3 {
            assert_eq!(out.row(i), base.row(i));
        }
        zero_params(&mut store);
        assert!(run(&store, &Array2::zeros((5, 3))).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_extractor_sees_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let fe = FeatureExtractor::new(&mut store, &mut rng, "fe", 3, 2);
        let ctx = random_grid(&mut rng, 4, 3);
        let run = |store: &ParamStore, x: &Array2<f64>| {
            let mut cx = Ctx::new(store);
            let y = fe.forward(&mut cx, x);
            cx.value(y).clone()
        };
        let base = run(&store, &ctx);
        assert_eq!(base.dim(), (12, 3));
        for i in 0..4 {
            for j in 0..3 {
                let mut p = ctx.clone();
                p[[i, j]] += 0.25;
                let out = run(&store, &p);
                // Full receptive field: the opposite corner moves too.
                let far = Geometry::new(4, 3).row(3 - i, 2 - j);
                assert!(out.row(far) != base.row(far), "({i},{j})");
            }
        }
        zero_params(&mut store);
        assert!(run(&store, &Array2::zeros((4, 3))).iter().all(|&v| v == 0.0));
    }
}
