//! AdamW with decoupled weight decay, freeze awareness and mask enforcement.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::param::Parameter;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state is keyed by parameter name so it survives checkpointing.
#[derive(Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step_count: u64,
    pub moments: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    /// One update over `params` at learning rate `lr`, consuming the grads
    /// currently stored on the parameters (and clearing them).
    ///
    /// Frozen parameters are left bit-identical (data, moments and grads
    /// untouched except the grad clear). Masked positions contribute no
    /// moment updates and are re-zeroed after the step.
    pub fn step(&mut self, params: &[Parameter], lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for p in params {
            if p.frozen() {
                p.tensor().zero_grad();
                continue;
            }
            let Some(mut grad) = p.tensor().grad_vec() else {
                continue;
            };
            if let Some(mask) = p.mask() {
                for (g, &m) in grad.iter_mut().zip(&mask) {
                    if m == 0 {
                        *g = 0.0;
                    }
                }
            }
            let n = grad.len();
            let entry = self.moments.entry(p.name().to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            p.tensor().update_data(|w| {
                for i in 0..n {
                    let g = grad[i];
                    entry.m[i] = c.beta1 * entry.m[i] + (1.0 - c.beta1) * g;
                    entry.v[i] = c.beta2 * entry.v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = entry.m[i] / bc1;
                    let v_hat = entry.v[i] / bc2;
                    w[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w[i]);
                }
            });
            p.enforce_mask();
            p.tensor().zero_grad();
        }
    }

    pub fn zero_grads(&self, params: &[Parameter]) {
        for p in params {
            p.tensor().zero_grad();
        }
    }
}
