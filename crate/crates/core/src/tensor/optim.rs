use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moment estimates and the step count
/// persist across calls to [`AdamW::step`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update using the gradients accumulated on `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        // Check up front so a failure never leaves a half-updated model.
        for (name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(TensorError::MissingGradient(name.to_string()));
            }
        }
        self.steps += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for ((w, g), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *w -= lr * weight_decay * *w;
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if tensor.data().iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "adamw_step" });
            }
        }
        Ok(())
    }
}
