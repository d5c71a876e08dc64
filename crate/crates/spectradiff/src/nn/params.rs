//! Named parameter storage and gradient accumulation buffers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::nn::tensor::TensorND;

/// One trainable parameter: its value and the accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: TensorND,
    pub grad: TensorND,
}

/// Map from parameter path (e.g. `"enc.c1.w"`) to value/gradient pairs.
///
/// A `BTreeMap` keeps iteration order deterministic, which the optimizer and
/// the checkpoint writer rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new parameter. Panics on duplicate paths: layer construction
    /// is static, so a duplicate is a programming error, not input error.
    pub fn register(&mut self, path: &str, value: TensorND) {
        let grad = TensorND::zeros(value.shape());
        let prev = self.entries.insert(path.to_string(), Param { value, grad });
        assert!(prev.is_none(), "duplicate parameter path {path}");
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn value(&self, path: &str) -> &TensorND {
        &self
            .entries
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter {path}"))
            .value
    }

    pub fn value_mut(&mut self, path: &str) -> &mut TensorND {
        &mut self
            .entries
            .get_mut(path)
            .unwrap_or_else(|| panic!("unknown parameter {path}"))
            .value
    }

    pub fn grad(&self, path: &str) -> &TensorND {
        &self
            .entries
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter {path}"))
            .grad
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Deterministic (path-sorted) iteration over parameters.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Add a gradient buffer's contents into the stored gradients.
    pub fn merge_grads(&mut self, grads: &GradStore) -> Result<()> {
        for (path, g) in grads.iter() {
            let p = self
                .entries
                .get_mut(path)
                .ok_or_else(|| Error::Training(format!("gradient for unknown parameter {path}")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {path} {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    /// Copy parameter values from another store with identical paths.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (path, p) in self.entries.iter_mut() {
            let src = other
                .entries
                .get(path)
                .unwrap_or_else(|| panic!("missing parameter {path} in source store"));
            p.value = src.value.clone();
        }
    }
}

/// Write-only gradient accumulation buffer.
///
/// Backward passes write here instead of into the [`ParamStore`] so a batch
/// can be split across workers; buffers are merged in a fixed order afterwards.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    entries: BTreeMap<String, TensorND>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate `g` into the buffer for `path`.
    pub fn accumulate(&mut self, path: &str, g: TensorND) {
        match self.entries.get_mut(path) {
            Some(t) => t.add_assign(&g),
            None => {
                self.entries.insert(path.to_string(), g);
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&TensorND> {
        self.entries.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorND)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Merge another buffer into this one (used for ordered cross-worker reduction).
    pub fn merge(&mut self, other: &GradStore) {
        for (path, g) in other.iter() {
            self.accumulate(path, g.clone());
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

/// He-style normal initialization for a convolution kernel `[Co,Ci,kh,kw]`.
pub fn he_conv_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> TensorND {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    TensorND::from_vec(shape, data).expect("shape/data agree")
}

/// He-style normal initialization for a linear weight `[O,I]`.
pub fn he_linear_init<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> TensorND {
    let std = (2.0 / in_dim as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let data = (0..out_dim * in_dim).map(|_| dist.sample(rng)).collect();
    TensorND::from_vec(&[out_dim, in_dim], data).expect("shape/data agree")
}

/// Small-uniform initialization for embedding tables.
pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> TensorND {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    TensorND::from_vec(shape, data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn register_and_merge() {
        let mut ps = ParamStore::new();
        ps.register("a", TensorND::zeros(&[2]));
        let mut gs = GradStore::new();
        gs.accumulate("a", TensorND::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        gs.accumulate("a", TensorND::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        ps.merge_grads(&gs).unwrap();
        assert_eq!(ps.grad("a").data(), &[2.0, 3.0]);
    }

    #[test]
    fn merge_rejects_unknown_path() {
        let mut ps = ParamStore::new();
        let mut gs = GradStore::new();
        gs.accumulate("ghost", TensorND::zeros(&[1]));
        assert!(ps.merge_grads(&gs).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            he_conv_init(&[4, 2, 3, 3], &mut r1),
            he_conv_init(&[4, 2, 3, 3], &mut r2)
        );
    }
}
