use std::collections::BTreeMap;

use super::{Matrix, ParamStore};
use crate::Result;

/// Compares analytic gradients against central finite differences over every
/// entry of every parameter in `store` and returns the largest relative error
/// `|a - fd| / max(|a|, |fd|, 1e-8)`.
///
/// `f` evaluates the loss and its analytic gradients for a parameter set.
/// Inputs whose gradient should be checked are placed in the store as well.
pub fn grad_check<F>(store: &ParamStore, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, BTreeMap<String, Matrix>)>,
{
    let (_, analytic) = f(store)?;
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (name, value) in store.params() {
        for i in 0..value.data.len() {
            let orig = value.data[i];
            probe.get_mut(name).unwrap().data[i] = orig + eps;
            let (up, _) = f(&probe)?;
            probe.get_mut(name).unwrap().data[i] = orig - eps;
            let (down, _) = f(&probe)?;
            probe.get_mut(name).unwrap().data[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |g| g.data[i]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
