use std::collections::BTreeMap;

use rand::Rng as _;

use super::Matrix;
use crate::rng::Rng;
use crate::{Error, Result};

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Iteration order is the name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    buffers: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Matrix> {
        self.buffers.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Matrix) {
        self.buffers.insert(name.into(), value);
    }

    pub fn params(&self) -> &BTreeMap<String, Matrix> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Matrix> {
        &self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|m| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Matrix::is_finite)
    }

    /// Weight matrix with entries uniform in ±sqrt(1 / fan_in).
    pub fn init_uniform(&mut self, rng: &mut Rng, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize) {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Matrix { rows, cols, data });
    }

    /// Applies recorded running-statistic updates to the buffers this store
    /// holds; updates for other stores are ignored.
    pub fn apply_buffer_updates(&mut self, updates: &[(String, Matrix)]) {
        for (name, value) in updates {
            if let Some(b) = self.buffers.get_mut(name) {
                *b = value.clone();
            }
        }
    }

    /// Checks that `other` has exactly the same tensor names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        let describe = |m: &BTreeMap<String, Matrix>| -> Vec<(String, (usize, usize))> {
            m.iter().map(|(k, v)| (k.clone(), v.shape())).collect()
        };
        for (a, b, what) in [
            (describe(&self.params), describe(&other.params), "parameter"),
            (describe(&self.buffers), describe(&other.buffers), "buffer"),
        ] {
            if a != b {
                let diff = a
                    .iter()
                    .zip(&b)
                    .find(|(x, y)| x != y)
                    .map(|(x, y)| format!("{} {:?} vs {} {:?}", x.0, x.1, y.0, y.1))
                    .unwrap_or_else(|| format!("{} vs {} tensors", a.len(), b.len()));
                return Err(Error::Shape(format!("{what} layout mismatch: {diff}")));
            }
        }
        Ok(())
    }
}
