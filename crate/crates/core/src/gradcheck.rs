//! Central finite-difference gradient checking.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::autodiff::{Tape, Var};
use crate::params::ParamStore;
use crate::rng::seeded;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(name, ‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖))` per parameter.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Compares the tape gradients of `loss_fn` against central differences for
/// every entry of every parameter in `store`.
pub fn check_gradients<F>(store: &ParamStore, eps: f64, loss_fn: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    check_gradients_sampled(store, eps, usize::MAX, 0, loss_fn)
}

/// Like [`check_gradients`] but checks at most `max_entries` randomly chosen
/// entries per parameter.
pub fn check_gradients_sampled<F>(
    store: &ParamStore,
    eps: f64,
    max_entries: usize,
    seed: u64,
    loss_fn: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    let grads = tape.backward(loss);
    let mut rng = seeded(seed, "gradcheck");
    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for id in store.ids() {
        let value = store.get(id);
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Matrix::zeros(value.rows, value.cols));
        let entries: Vec<usize> = if value.len() <= max_entries {
            (0..value.len()).collect()
        } else {
            let mut e = sample(&mut rng, value.len(), max_entries).into_vec();
            e.sort_unstable();
            e
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &entries {
            let orig = value.data[i];
            work.get_mut(id).data[i] = orig + eps;
            let plus = eval(&work, &loss_fn);
            work.get_mut(id).data[i] = orig - eps;
            let minus = eval(&work, &loss_fn);
            work.get_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data[i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            checked += 1;
        }
        let denom = libm::sqrt(a2) + libm::sqrt(n2);
        let rel = if denom < 1e-12 { 0.0 } else { libm::sqrt(diff2) / denom };
        max_rel = max_rel.max(rel);
        per_param.push((store.name(id).to_string(), rel));
    }
    GradCheckReport { per_param, max_rel_error: max_rel, entries_checked: checked }
}

fn eval<F>(store: &ParamStore, loss_fn: &F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    tape.scalar(loss)
}
