use super::array::Tensor;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-parameter first/second moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    fn ensure(&mut self, store: &ParamStore) {
        while self.m.len() < store.len() {
            self.m.push(None);
            self.v.push(None);
        }
    }

    /// Apply one update to every trainable parameter, then zero the
    /// gradients. Every trainable parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.ensure(store);
        let ids: Vec<ParamId> = store
            .iter_ids()
            .filter(|(_, id)| store.get(*id).requires_grad)
            .map(|(_, id)| id)
            .collect();
        for &id in &ids {
            if store.get(id).grad.is_none() {
                return Err(Error::Optimizer(format!(
                    "missing gradient for `{}`",
                    store.name(id)
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.as_mut().expect("checked above");
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let values = p.value.data_mut();
            for (((w, g), mi), vi) in values
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
            grad.fill(0.0);
        }
        Ok(())
    }
}
