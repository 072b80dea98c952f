//! Named parameter store with accumulated gradients and ADAM state.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ADAM hyperparameters plus the learning-rate anneal schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiply the learning rate by this factor every `anneal_every` epochs.
    pub anneal_factor: f64,
    pub anneal_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            anneal_factor: 0.8,
            anneal_every: 3,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1), got {b}")));
            }
        }
        Ok(())
    }

    /// Annealed learning rate for a zero-indexed epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.anneal_every == 0 {
            return self.lr;
        }
        self.lr * self.anneal_factor.powi((epoch / self.anneal_every) as i32)
    }
}

/// Per-parameter ADAM moments.
#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Gradient buffer detached from any store. Parallel workers each fill one
/// of these; the training loop then folds them into the store's gradients
/// in example order so runs stay bit-reproducible.
#[derive(Debug, Clone, Default)]
pub struct GradBuffer {
    grads: BTreeMap<String, Tensor>,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mutable gradient for `name`, created zeroed at `shape` on first use.
    pub fn entry(&mut self, name: &str, shape: &[usize]) -> &mut Tensor {
        self.grads.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += alpha * other` over the union of entries.
    pub fn axpy(&mut self, alpha: f64, other: &GradBuffer) {
        for (name, g) in other.grads.iter() {
            self.grads
                .entry(name.clone())
                .and_modify(|acc| acc.axpy(alpha, g))
                .or_insert_with(|| {
                    let mut t = Tensor::zeros(g.shape());
                    t.axpy(alpha, g);
                    t
                });
        }
    }

    /// Largest absolute difference against another buffer (union of keys).
    pub fn max_abs_diff(&self, other: &GradBuffer) -> f64 {
        let mut worst = 0.0f64;
        for (name, g) in self.grads.iter().chain(other.grads.iter()) {
            let a = self.grads.get(name);
            let b = other.grads.get(name);
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data().iter().zip(b.data().iter()) {
                        worst = worst.max((x - y).abs());
                    }
                }
                (Some(t), None) | (None, Some(t)) => {
                    for x in t.data() {
                        worst = worst.max(x.abs());
                    }
                }
                (None, None) => {}
            }
            let _ = g;
        }
        worst
    }
}

/// All trainable tensors of one model, with gradients and optimizer state.
/// Parameters are keyed by name; iteration order is the sorted name order,
/// which keeps reductions and checkpoints deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), grads: BTreeMap::new(), moments: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.moments.insert(
            name.to_string(),
            Moments { m: Tensor::zeros(value.shape()), v: Tensor::zeros(value.shape()) },
        );
        self.params.insert(name.to_string(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        self.grads.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        self.grads.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn moments_of(&self, name: &str) -> (&Tensor, &Tensor) {
        let m = &self.moments[name];
        (&m.m, &m.v)
    }

    pub(crate) fn set_moments(&mut self, name: &str, m: Tensor, v: Tensor) {
        let slot = self.moments.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(m.shape(), slot.m.shape(), "moment shape mismatch for {name}");
        assert_eq!(v.shape(), slot.v.shape(), "moment shape mismatch for {name}");
        slot.m = m;
        slot.v = v;
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    /// Fold a detached buffer into the store's gradients.
    pub fn add_gradients(&mut self, buf: &GradBuffer) {
        for (name, g) in buf.iter() {
            let acc = self.grads.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
            acc.axpy(1.0, g);
        }
    }

    /// One bias-corrected ADAM update at learning rate `lr` over every
    /// parameter. Gradients are zeroed afterwards and the step counter is
    /// incremented. A non-finite gradient poisons the whole step: no
    /// parameter is touched and the offending name is reported.
    pub fn adam_step(&mut self, cfg: &AdamConfig, lr: f64) -> Result<()> {
        for (name, g) in self.grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter '{name}'")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = &self.grads[name];
            let mom = self.moments.get_mut(name).unwrap();
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let m = cfg.beta1 * mom.m.data()[i] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * mom.v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                mom.m.data_mut()[i] = m;
                mom.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        self.zero_grads();
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}
