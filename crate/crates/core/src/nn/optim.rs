use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// L2 penalty added to the gradient.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam over the trainable parameters of one [`ParamStore`]. Moment
/// estimates are kept by parameter name so they can be checkpointed.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // detached so moment estimates never chain autograd graphs across steps
            let g = g.detach();
            let g = if c.weight_decay > 0.0 { (g + (var.as_tensor().detach() * c.weight_decay)?)? } else { g };
            let m = match self.first.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor() - (update * c.lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors as `first.<param>` / `second.<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.first
            .iter()
            .map(|(k, v)| (format!("first.{k}"), v.clone()))
            .chain(self.second.iter().map(|(k, v)| (format!("second.{k}"), v.clone())))
            .collect()
    }

    pub fn restore(config: AdamConfig, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut opt = Self::new(config);
        opt.step = step;
        for (k, v) in tensors {
            if let Some(name) = k.strip_prefix("first.") {
                opt.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("second.") {
                opt.second.insert(name.to_string(), v.clone());
            } else {
                return Err(Error::Structure(format!("unexpected optimizer tensor {k}")));
            }
        }
        Ok(opt)
    }
}

/// Rescales all gradients of `store` so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &ParamStore, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (_, var) in store.trainable() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for (_, var) in store.trainable() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(var.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new(DType::F64);
        let w = store.add_constant("w", &[2], 1.0, true).unwrap();
        let loss = (w.as_tensor() * Tensor::from_vec(vec![3.0, -2.0], 2, &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(&store, &grads).unwrap();
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] - 1.1).abs() < 1e-6);
        let restored = Adam::restore(*opt.config(), opt.steps(), &opt.state_tensors().into_iter().collect()).unwrap();
        assert_eq!(restored.steps(), 1);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::new(DType::F64);
        let w = store.add_constant("w", &[2], 0.0, true).unwrap();
        let loss = (w.as_tensor() * Tensor::from_vec(vec![30.0, 40.0], 2, &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        let mut grads = loss.backward().unwrap();
        let before = clip_grad_norm(&store, &mut grads, 5.0).unwrap();
        assert!((before - 50.0).abs() < 1e-12);
        let g = grads.get(w.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }
}
