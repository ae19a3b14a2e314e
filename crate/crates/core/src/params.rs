//! Named parameter storage and the Adam optimiser.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::tensor::Matrix;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of named matrices. Insertion order is preserved and is
/// the order used by checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter, replacing the value if the name already exists.
    pub fn insert(&mut self, name: &str, value: Matrix) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            self.values[i] = value;
            return ParamId(i);
        }
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Matrix)> + 'a {
        self.iter().filter(move |(n, _)| n.starts_with(prefix))
    }

    /// Copies every parameter of `other` into `self` (by name).
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (n, m) in other.iter() {
            self.insert(n, m.clone());
        }
    }

    /// Rebuilds the name index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 5.0 }
    }
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` (schedules are the
    /// caller's business).
    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c = self.config;
        let norm = grads.global_norm();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (id, g) in grads.params() {
            let p = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Matrix::zeros(p.rows, p.cols), Matrix::zeros(p.rows, p.cols)));
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (libm::sqrt(vh) + c.eps);
            }
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr);
    }
}

/// Cosine decay from `lr` to `lr * floor` over `total` epochs.
pub fn cosine_lr(lr: f64, epoch: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let t = epoch as f64 / (total - 1) as f64;
    let cos = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t));
    lr * (floor + (1.0 - floor) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn insert_replaces_by_name() {
        let mut s = ParamStore::new();
        let a = s.insert("w", Matrix::zeros(1, 1));
        let b = s.insert("w", Matrix::filled(1, 1, 2.0));
        assert_eq!(a, b);
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(a).data[0], 2.0);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut s = ParamStore::new();
        let id = s.insert("x", Matrix::row_vector(alloc::vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..300 {
            let mut tape = Tape::new();
            let x = tape.param(&s, id);
            let sq = tape.square(x);
            let loss = tape.sum_all(sq);
            let g = tape.backward(loss);
            opt.step(&mut s, &g);
        }
        assert!(s.get(id).max_abs() < 1e-2, "{:?}", s.get(id));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 11, 0.1), 1.0);
        assert!((cosine_lr(1.0, 10, 11, 0.1) - 0.1).abs() < 1e-12);
    }
}
