//! Minibatch Adam loop shared by every stage.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{cosine_lr, Adam, AdamConfig, ParamStore};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine schedule).
    pub lr_floor: f64,
    pub clip_norm: f64,
    /// `0` means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-2, lr_floor: 0.05, clip_norm: 5.0, batch_size: 0, seed: 42 }
    }
}

impl TrainConfig {
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }
}

/// Runs `cfg.epochs` epochs over `n_items` items, shuffling with a stream
/// derived from `label`. `loss_fn` builds the loss of one batch of item
/// indices; only parameters whose names start with one of `trainable` are
/// updated. Returns the mean loss of every epoch.
pub fn fit<F>(
    store: &mut ParamStore,
    trainable: &[&str],
    cfg: &TrainConfig,
    n_items: usize,
    label: &str,
    mut loss_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &ParamStore, &[usize]) -> Result<Var>,
{
    if n_items == 0 {
        return Err(Error::InsufficientData(format!("{label}: nothing to train on")));
    }
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: cfg.clip_norm, ..AdamConfig::default() });
    let mut rng = seeded(cfg.seed, label);
    let batch = if cfg.batch_size == 0 { n_items } else { cfg.batch_size.min(n_items) };
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.lr_floor);
        let (mut total, mut weight) = (0.0, 0.0);
        for chunk in order.chunks(batch) {
            let mut tape = Tape::training(trainable);
            let loss = loss_fn(&mut tape, store, chunk)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("{label}: loss became {value} at epoch {epoch}")));
            }
            let grads = tape.backward(loss);
            adam.step_with_lr(store, &grads, lr);
            total += value * chunk.len() as f64;
            weight += chunk.len() as f64;
        }
        history.push(total / weight);
    }
    if !store.all_finite() {
        return Err(Error::Numeric(format!("{label}: parameters became non-finite")));
    }
    Ok(history)
}

/// Means of consecutive non-overlapping windows of `losses`.
pub fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses.chunks(window.max(1)).filter(|c| c.len() == window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Whether window means never rise by more than `tol`.
pub fn smoothed_non_increasing(losses: &[f64], window: usize, tol: f64) -> bool {
    window_means(losses, window).windows(2).all(|w| w[1] <= w[0] + tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn fit_minimises_a_quadratic_and_respects_prefixes() {
        let mut store = ParamStore::new();
        let a = store.insert("a.x", Matrix::row_vector(alloc::vec![3.0, -2.0]));
        let b = store.insert("b.x", Matrix::row_vector(alloc::vec![1.0]));
        let cfg = TrainConfig { epochs: 300, lr: 0.05, ..TrainConfig::default() };
        let hist = fit(&mut store, &["a."], &cfg, 1, "quad", |tape, store, _| {
            let x = tape.param(store, a);
            let y = tape.param(store, b);
            let sx = tape.square(x);
            let sy = tape.square(y);
            let l1 = tape.sum_all(sx);
            let l2 = tape.sum_all(sy);
            Ok(tape.add(l1, l2))
        })
        .unwrap();
        assert!(store.get(a).max_abs() < 1e-2);
        assert_eq!(store.get(b).data, alloc::vec![1.0]);
        assert!(smoothed_non_increasing(&hist, 10, 1e-3));
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Matrix::row_vector(alloc::vec![3.0]));
        let before = store.clone();
        let hist = fit(&mut store, &[""], &TrainConfig::default().with_epochs(0), 1, "q", |tape, store, _| {
            let x = tape.param(store, a);
            Ok(tape.sum_all(x))
        })
        .unwrap();
        assert!(hist.is_empty());
        assert_eq!(store.get(a), before.get(a));
    }
}
