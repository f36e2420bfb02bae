use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient are left untouched (including weight decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| {
                Error::contract(format!("gradient for unknown parameter {name:?}"))
            })?;
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter {name:?} shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| g.zeros_like());
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| g.zeros_like());
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *pv -= lr * weight_decay * *pv;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut params = scalar_store(1.5);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(0.0))]);
        for _ in 0..5 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params.get("p").unwrap().item(), 1.5);
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn positive_gradient_decreases_parameter() {
        let mut params = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]);
        opt.step(&mut params, &grads).unwrap();
        let p = params.get("p").unwrap().item();
        assert!(p < 1.0);
        // first bias-corrected step moves by lr * g/|g|
        assert!((p - 0.9).abs() < 1e-6);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamWConfig::default().lr, 2e-5);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut params = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = BTreeMap::from([("p".to_string(), Tensor::zeros(1, 2))]);
        assert!(matches!(opt.step(&mut params, &grads), Err(Error::Contract(_))));
        let grads = BTreeMap::from([("q".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(opt.step(&mut params, &grads), Err(Error::Contract(_))));
        assert_eq!(opt.steps_taken(), 0);
    }
}
