use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cosine decay from 1 at step 0 to 0 at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn multiplier(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return 1.0;
        }
        let progress = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        (0.5 * (1.0 + (PI * progress).cos())).max(0.0)
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay under a cosine learning-rate schedule.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: CosineSchedule,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, total_steps: usize) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: CosineSchedule { total_steps },
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter that carries a gradient and clears the slot.
    /// Returns the number of scalars updated. Results are rounded to `f32`.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, step_index: usize) -> Result<usize> {
        if step_index >= self.schedule.total_steps.max(1) {
            return Err(Error::Contract(format!(
                "step {step_index} is past the {} scheduled steps",
                self.schedule.total_steps
            )));
        }
        for (name, p) in &params {
            if let Some(g) = &p.grad {
                if g.len() != p.len() {
                    return Err(Error::shape("optimizer", p.shape(), &[g.len()]));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for {name}")));
                }
            }
        }
        let lr = self.learning_rate * self.schedule.multiplier(step_index);
        let t = (step_index + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut updated = 0;
        for (name, p) in params {
            let Some(g) = p.grad.take() else { continue };
            let state = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * gi;
                state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                let next = *w - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
                *w = next as f32 as f64;
            }
            updated += g.len();
        }
        Ok(updated)
    }
}
