//! Named trainable parameters with accumulated gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Opaque handle to one parameter in a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Registry of model parameters. Registration order is the canonical
/// iteration order everywhere (optimizer steps, serialization, reports),
/// which keeps runs reproducible.
#[derive(Debug, Default, Clone)]
pub struct ParameterStore {
    params: Vec<Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter with explicit initial values.
    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param { name: name.to_string(), value, grad, trainable });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Registers a parameter drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.register(name, Tensor::new(shape, data)?, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Looks a parameter up by its registered name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Sets every gradient to zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Global L2 norm across all trainable gradients.
    pub fn grad_global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for p in &self.params {
            if p.trainable {
                for g in p.grad.data() {
                    sq += g * g;
                }
            }
        }
        sq.sqrt()
    }

    /// Scales every trainable gradient so the global norm is at most
    /// `max_norm`. Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                if p.trainable {
                    for g in p.grad.data_mut() {
                        *g *= scale;
                    }
                }
            }
        }
        norm
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn register_rejects_duplicates() {
        let mut store = ParameterStore::new();
        store.register("w", Tensor::scalar(1.0), true).unwrap();
        assert!(store.register("w", Tensor::scalar(2.0), true).is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = stream_rng(0, Stream::ParamInit);
        let mut store = ParameterStore::new();
        let id = store.register_uniform("w", vec![64, 64], 64, &mut rng).unwrap();
        let bound = 1.0 / 8.0;
        for &v in store.value(id).data() {
            assert!(v >= -bound && v <= bound, "{v} outside [-{bound}, {bound}]");
        }
        // Values actually spread through the interval rather than collapsing.
        let spread = store
            .value(id)
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(spread.1 - spread.0 > bound);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut store = ParameterStore::new();
        let id = store.register("w", Tensor::vector(vec![0.0, 0.0]), true).unwrap();
        store.grad_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        let before = store.clip_grad_norm(10.0);
        assert_eq!(before, 5.0);
        assert_eq!(store.grad(id).data(), &[3.0, 4.0]);

        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_global_norm() - 1.0).abs() < 1e-12);
        assert!((store.grad(id).data()[0] - 0.6).abs() < 1e-12);
        assert!((store.grad(id).data()[1] - 0.8).abs() < 1e-12);
    }
}
