//! Adam with bias correction, plus the step-indexed learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{AdamState, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Adam config {self:?}")))
        }
    }

    pub fn with_learning_rate(self, learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..self
        }
    }
}

/// One Adam update over every parameter in `store`, then zeroes the gradients.
///
/// Every parameter must carry a gradient buffer; the first one without a
/// gradient aborts the step before anything is modified.
pub fn adam_step(store: &mut ParamStore, config: &AdamConfig) -> Result<()> {
    config.validate()?;
    if let Some((key, _)) = store.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGradient(key.to_string()));
    }
    let keys: Vec<String> = store.keys().map(str::to_string).collect();
    for key in keys {
        let n = store.get(&key).map(|t| t.len()).unwrap_or(0);
        let state = store.optim.entry(key.clone()).or_insert_with(|| AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let mut state = std::mem::take(state);
        let param = store.get_mut(&key).expect("key listed above");
        let grad: Vec<f64> = param.grad().expect("checked above").to_vec();
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
            state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        param.zero_grad();
        store.optim.insert(key, state);
    }
    Ok(())
}

/// Piecewise-constant schedule: `base` for the first `decay_fraction` of the
/// steps, `base * decay_factor` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub steps: usize,
    pub base: f64,
    pub decay_fraction: f64,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn constant(steps: usize, base: f64) -> Self {
        LrSchedule {
            steps,
            base,
            decay_fraction: 1.0,
            decay_factor: 1.0,
        }
    }

    /// Two equal phases with a tenfold decay between them.
    pub fn two_phase(steps: usize, base: f64) -> Self {
        LrSchedule {
            steps,
            base,
            decay_fraction: 0.5,
            decay_factor: 0.1,
        }
    }

    pub fn rate_at(&self, step: usize) -> f64 {
        let boundary = (self.steps as f64 * self.decay_fraction).round() as usize;
        if step < boundary {
            self.base
        } else {
            self.base * self.decay_factor
        }
    }
}
