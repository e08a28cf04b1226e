//! Named parameter storage, gradient buffers and initializers.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of trainable matrices. Order of registration is the
/// serialization order, so it must be deterministic for a given config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Shapes in registration order; used to validate checkpoints.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.nrows(), v.ncols()))
            .collect()
    }

    /// Replace all values. Shapes must match the current layout.
    pub fn load_values(&mut self, values: Vec<Array2<f64>>) -> crate::Result<()> {
        if values.len() != self.values.len() {
            return Err(crate::Error::CheckpointMismatch(format!(
                "expected {} parameter tensors, found {}",
                self.values.len(),
                values.len()
            )));
        }
        for ((name, old), new) in self.names.iter().zip(&self.values).zip(&values) {
            if old.dim() != new.dim() {
                return Err(crate::Error::CheckpointMismatch(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    old.dim(),
                    new.dim()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store.values.iter().map(|v| Array2::zeros(v.dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * c);
        }
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Rescale so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm.is_finite() && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Glorot-style uniform init in `±sqrt(6 / (fan_in + fan_out))`.
pub fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

/// Uniform init with an explicit bound.
pub fn uniform_scaled(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Square orthogonal matrix from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut impl Rng, n: usize) -> Array2<f64> {
    loop {
        let mut m: Array2<f64> = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(rng));
        let mut ok = true;
        for c in 0..n {
            for p in 0..c {
                let dot: f64 = (0..n).map(|r| m[[r, c]] * m[[r, p]]).sum();
                for r in 0..n {
                    m[[r, c]] -= dot * m[[r, p]];
                }
            }
            let norm: f64 = (0..n).map(|r| m[[r, c]] * m[[r, c]]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for r in 0..n {
                m[[r, c]] /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}

/// RMSProp with momentum: `ms ← ρ·ms + (1-ρ)·g²`,
/// `mom ← μ·mom + lr·g / (sqrt(ms) + ε)`, `p ← p - mom`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub mean_square: Vec<Array2<f64>>,
    pub velocity: Vec<Array2<f64>>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, learning_rate: f64, momentum: f64) -> Self {
        let zeros = || store.values.iter().map(|v| Array2::zeros(v.dim())).collect();
        Self {
            learning_rate,
            momentum,
            decay: 0.9,
            epsilon: 1e-8,
            mean_square: zeros(),
            velocity: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let (lr, mu, rho, eps) = (self.learning_rate, self.momentum, self.decay, self.epsilon);
        for (((p, g), ms), vel) in store
            .values
            .iter_mut()
            .zip(&grads.values)
            .zip(&mut self.mean_square)
            .zip(&mut self.velocity)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(ms)
                .and(vel)
                .for_each(|p, &g, ms, v| {
                    *ms = rho * *ms + (1.0 - rho) * g * g;
                    *v = mu * *v + lr * g / (ms.sqrt() + eps);
                    *p -= *v;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = orthogonal(&mut rng, 6);
        let qtq = q.t().dot(&q);
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[[i, j]] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut store = ParamStore::new();
        store.add("a", Array2::zeros((1, 2)));
        let mut g = Gradients::zeros_like(&store);
        g.values[0][[0, 0]] = 3.0;
        g.values[0][[0, 1]] = 4.0;
        let before = g.clone();
        assert_eq!(g.clip_norm(f64::INFINITY), 5.0);
        assert_eq!(g, before);
        g.clip_norm(1.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_descends_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 1), 3.0));
        let mut opt = RmsProp::new(&store, 0.01, 0.9);
        for _ in 0..2000 {
            let mut g = Gradients::zeros_like(&store);
            g.values[0][[0, 0]] = 2.0 * store.get(id)[[0, 0]];
            opt.step(&mut store, &g);
        }
        assert!(store.get(id)[[0, 0]].abs() < 0.05);
    }
}
