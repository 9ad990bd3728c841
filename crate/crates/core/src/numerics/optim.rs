use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            method: Method::Sgd,
            lr,
            ..Self::default()
        }
    }
}

/// Adaptive-moment (or plain SGD) state over a fixed subset of a store's weights.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    step: u64,
    params: Vec<ParamId>,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>, config: OptimizerConfig) -> Self {
        let first: Vec<Vec<T>> = params
            .iter()
            .map(|&id| vec![T::zero(); store.get(id).len()])
            .collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
            params,
        }
    }

    /// Optimizes every weight of the store.
    pub fn for_all_weights(store: &ParamStore<T>, config: OptimizerConfig) -> Self {
        Self::new(store, store.weight_ids(), config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update. Every managed parameter must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)]) -> Result<()> {
        let mut ordered: Vec<&[T]> = Vec::with_capacity(self.params.len());
        for &id in &self.params {
            let g = grads
                .iter()
                .find(|(gid, _)| *gid == id)
                .map(|(_, g)| g.as_slice())
                .ok_or_else(|| Error::MissingGrad(store.name(id).to_string()))?;
            if g.len() != store.get(id).len() {
                return Err(Error::dim("optimizer_step", store.get(id).shape(), &[g.len()]));
            }
            ordered.push(g);
        }
        let mut scale = T::one();
        if self.config.clip_norm > 0.0 {
            let norm: f64 = ordered
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| {
                    let f = v.to_f64().unwrap_or(0.0);
                    f * f
                })
                .sum::<f64>()
                .sqrt();
            if norm > self.config.clip_norm {
                scale = T::lit(self.config.clip_norm / norm);
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = T::lit(c.lr);
        match c.method {
            Method::Sgd => {
                for (&id, g) in self.params.iter().zip(&ordered) {
                    for (p, &gv) in store.get_mut(id).data_mut().iter_mut().zip(g.iter()) {
                        *p -= lr * scale * gv;
                    }
                }
            }
            Method::Adam => {
                let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
                let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
                let eps = T::lit(c.eps);
                for (k, (&id, g)) in self.params.iter().zip(&ordered).enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    let data = store.get_mut(id).data_mut();
                    for i in 0..data.len() {
                        let gv = g[i] * scale;
                        m[i] = b1 * m[i] + (T::one() - b1) * gv;
                        v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
