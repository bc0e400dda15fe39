use crate::error::{Result, SteerError};

use super::tensor::Tensor;

/// A trainable tensor paired with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat parameter storage for one trainable object (a network or a
/// transformation). Each training session owns exactly one mutable store;
/// anything else entering a forward pass is treated as a constant.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.params[id.0].value;
        if !current.same_shape(&value) {
            return Err(SteerError::shape(
                "ParamStore::set_value",
                format!("{:?}", current.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    /// Add `delta` to one scalar entry; finite-difference probes use this.
    pub fn nudge(&mut self, id: ParamId, entry: usize, delta: f64) {
        self.params[id.0].value.data_mut()[entry] += delta;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let p = &mut self.params[id.0];
        debug_assert!(p.grad.same_shape(grad));
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
    }

    /// Plain gradient-descent step: value ← value − lr · grad.
    pub fn sgd_step(&mut self, lr: f64) {
        self.sgd_step_decayed(lr, 0.0);
    }

    /// Gradient step with multiplicative weight decay:
    /// value ← (1 − decay)·value − lr · grad. The decay pins parameter
    /// components that receive no restoring gradient.
    pub fn sgd_step_decayed(&mut self, lr: f64, decay: f64) {
        for p in &mut self.params {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v = (1.0 - decay) * *v - lr * g;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Total number of scalar parameter entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn values_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Adam moment buffers over one store, used by base-model pretraining.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let grads = p.grad.data();
            for ((value, g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *value -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
