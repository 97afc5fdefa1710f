use std::collections::BTreeMap;

use super::{Matrix, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(store: &mut ParamStore, grads: &BTreeMap<String, Matrix>, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let Some(p) = store.get_mut(name) else { continue };
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(g.rows, g.cols));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(g.rows, g.cols));
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m.data[i] / c1;
            let vhat = v.data[i] / c2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}
