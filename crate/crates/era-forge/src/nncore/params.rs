//! Named parameter storage: each trainable tensor plus its gradient accumulator.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One trainable parameter and its gradient accumulator (same shape).
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Insertion-ordered map of named parameters. Iteration order is the
/// registration order, which keeps optimizer sweeps and checkpoints
/// deterministic across runs.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .grad
    }

    /// Add `delta` into the gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))?;
        p.grad.add_assign(delta)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.values_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient by `s` (used for global-norm clipping).
    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.scale(s);
        }
    }
}

/// He-normal initialization for conv/linear weights feeding ELU stacks.
pub(crate) fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| gauss(rng) * std).collect();
    Tensor::from_values(shape, values).expect("he_normal shape")
}

/// Xavier-uniform initialization.
pub(crate) fn xavier_uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_values(shape, values).expect("xavier shape")
}

/// Box-Muller standard normal draw.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let v = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if v.is_finite() {
            return v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn grad_shape_tracks_value_shape() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(store.grad("w").shape(), &[3, 4]);
    }

    #[test]
    fn insertion_order_is_stable() {
        let mut store = ParamStore::new();
        for name in ["c", "a", "b"] {
            store.insert(name, Tensor::zeros(&[1])).unwrap();
        }
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["c", "a", "b"]);
    }
}
