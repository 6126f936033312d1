//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::Array;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the step counter.
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, value) in params.iter() {
            m.insert(name.to_string(), Array::zeros(value.rows(), value.cols()));
            v.insert(name.to_string(), Array::zeros(value.rows(), value.cols()));
        }
        AdamState {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients; gradients are cleared
    /// afterward so the next batch starts from zero.
    pub fn apply(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let t = self.step as f64;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        params.update_each(|name, value, grad| {
            let m = self.m.get_mut(name).expect("moment missing for parameter");
            let v = self.v.get_mut(name).expect("moment missing for parameter");
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            grad.data_mut().fill(0.0);
        });
    }
}
