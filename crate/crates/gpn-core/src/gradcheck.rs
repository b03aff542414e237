//! Central finite-difference gradient checking.
//!
//! Independent of the tape: it only perturbs parameter values and
//! re-evaluates a loss closure.

use std::collections::BTreeMap;

use crate::store::ParameterStore;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` w.r.t. every component of the named
/// slots. `f` must be a pure function of the store values.
pub fn finite_diff<F>(
    store: &mut ParameterStore,
    names: &[&str],
    step: f64,
    mut f: F,
) -> BTreeMap<String, Tensor>
where
    F: FnMut(&ParameterStore) -> f64,
{
    let mut out = BTreeMap::new();
    for &name in names {
        let n = store.value(name).expect("finite_diff: unknown slot").numel();
        let mut grad = Tensor::zeros_like(store.value(name).unwrap());
        for i in 0..n {
            let orig = store.value(name).unwrap().data()[i];
            store.value_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = f(store);
            store.value_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = f(store);
            store.value_mut(name).unwrap().data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.insert(name.to_string(), grad);
    }
    out
}

/// Worst relative error between two gradient values. Near-zero pairs are
/// compared absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Max relative error over all components of all compared slots. Slots the
/// analytic side never touched are compared against zero.
pub fn max_rel_error(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, num) in numeric {
        match analytic.get(name) {
            Some(ana) => {
                for (a, n) in ana.data().iter().zip(num.data()) {
                    worst = worst.max(rel_error(*a, *n));
                }
            }
            None => {
                for n in num.data() {
                    worst = worst.max(rel_error(0.0, *n));
                }
            }
        }
    }
    worst
}
