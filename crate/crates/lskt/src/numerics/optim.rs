//! AdamW: Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::numerics::params::ParameterStore;
use crate::numerics::tensor::Tensor;

/// Optimizer state: first/second moment per parameter plus a step counter.
///
/// Moments are kept in parameter registration order, so updates and
/// serialization are deterministic.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamW {
    /// Creates the optimizer with zeroed moments for every parameter
    /// currently in the store.
    pub fn new(store: &ParameterStore, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape().to_vec()))
            .collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: shapes.clone(),
            second_moment: shapes,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter. Weight decay is applied
    /// directly to the parameter (decoupled from the moment estimates), then
    /// the bias-corrected Adam step follows. Gradients are left intact; the
    /// caller zeroes them.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if self.first_moment.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters but store holds {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            if !store.trainable(id) {
                continue;
            }
            let grad = store.grad(id).clone();
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let value = store.value_mut(id);
            for k in 0..value.len() {
                let g = grad.data()[k];
                let p = &mut value.data_mut()[k];
                *p *= 1.0 - self.lr * self.weight_decay;
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * g;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * g * g;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Flat little-endian serialization of (first moments, second moments).
    pub fn moments_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in self.first_moment.iter().chain(&self.second_moment) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Restores moments from [`AdamW::moments_blob`] output, given a step
    /// counter stored alongside.
    pub fn restore(&mut self, step: u64, blob: &[u8]) -> Result<()> {
        let total: usize = self
            .first_moment
            .iter()
            .chain(&self.second_moment)
            .map(Tensor::len)
            .sum();
        if blob.len() != total * 8 {
            return Err(Error::Config(format!(
                "optimizer blob holds {} bytes, expected {}",
                blob.len(),
                total * 8
            )));
        }
        let mut offset = 0;
        for t in self.first_moment.iter_mut().chain(&mut self.second_moment) {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(blob[offset..offset + 8].try_into().expect("8 bytes"));
                offset += 8;
            }
        }
        self.step = step;
        Ok(())
    }
}
