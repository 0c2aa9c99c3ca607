//! Adam with bias-corrected moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamState {
    /// Zero moments for every parameter currently in `store`.
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let moments = store
            .iter()
            .map(|p| {
                (
                    p.id,
                    Moments {
                        first: Tensor::zeros(p.value.shape()),
                        second: Tensor::zeros(p.value.shape()),
                    },
                )
            })
            .collect();
        AdamState {
            config,
            step: 0,
            moments,
        }
    }

    /// One Adam update of every parameter in `store` using its current gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(p) = store.iter().find(|p| !self.moments.contains_key(&p.id)) {
            return Err(Error::State(format!("no moments for parameter {:?}", p.id)));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in store.iter_mut() {
            let m = self.moments.get_mut(&p.id).expect("checked above");
            if m.first.shape() != p.value.shape() {
                return Err(Error::State(format!(
                    "moment shape {:?} does not match parameter {:?} shape {:?}",
                    m.first.shape(),
                    p.id,
                    p.value.shape()
                )));
            }
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let first = m.first.data_mut();
            let second = m.second.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                first[i] = beta1 * first[i] + (1.0 - beta1) * g;
                second[i] = beta2 * second[i] + (1.0 - beta2) * g * g;
                let m_hat = first[i] / c1;
                let v_hat = second[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
