//! AdamW with decoupled weight decay, and the warmup-cosine learning-rate
//! schedule.

use std::collections::HashMap;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        // β1 0.9, β2 0.999, weight decay 1e-4
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Per-parameter first/second moment state keyed by parameter name, so the
/// update is invariant to the iteration order of the parameters.
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    step: u64,
    lr: f64,
    slots: HashMap<String, Slot<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            lr: 0.0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter and fix the learning rate used by the
    /// subsequent [`AdamW::update`] calls of this step.
    pub fn begin_step(&mut self, lr: f64) {
        self.step += 1;
        self.lr = lr;
    }

    /// Standard AdamW update with bias correction and decoupled decay.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if grad.shape() != param.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let n = param.numel();
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        if slot.m.len() != n {
            return Err(TensorError::Contract(format!(
                "optimizer slot for {name} has stale size"
            )));
        }
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let eps = T::from_f64(self.cfg.epsilon);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let decay = T::from_f64(self.lr * self.cfg.weight_decay);

        let g = grad.data();
        let mut out = param.data().to_vec();
        for i in 0..n {
            let gi = g[i];
            slot.m[i] = b1 * slot.m[i] + (one - b1) * gi;
            slot.v[i] = b2 * slot.v[i] + (one - b2) * gi * gi;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            out[i] = out[i] - lr * m_hat / (v_hat.sqrt() + eps) - decay * out[i];
        }
        param.assign(out)
    }

    /// (name, m, v) triples for checkpointing, sorted by name.
    pub fn state_blobs(&self) -> Vec<(String, Vec<T>, Vec<T>)> {
        let mut names: Vec<&String> = self.slots.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                let s = &self.slots[n];
                (n.clone(), s.m.clone(), s.v.clone())
            })
            .collect()
    }

    pub fn restore(&mut self, step: u64, blobs: Vec<(String, Vec<T>, Vec<T>)>) {
        self.step = step;
        self.slots = blobs
            .into_iter()
            .map(|(n, m, v)| (n, Slot { m, v }))
            .collect();
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `0.1 · base_lr`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Warmup over 5% of the total step budget.
    pub fn warmup_cosine(base_lr: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            warmup_steps: (total_steps as f64 * 0.05).round() as u64,
            total_steps,
        }
    }

    pub fn lr_at_step(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(TensorError::Contract(format!(
                "step {step} outside schedule range 0..={}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        if self.total_steps == self.warmup_steps {
            return Ok(self.base_lr);
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let floor = 0.1 * self.base_lr;
        let span = 0.9 * self.base_lr;
        Ok(floor + span * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
