use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub(crate) step: u64,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores a previously saved state; shapes must match `params`.
    pub fn restore(
        config: AdamConfig,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        params: &ParamStore,
    ) -> crate::Result<Self> {
        let ok = m.len() == params.len()
            && v.len() == params.len()
            && params
                .iter()
                .zip(m.iter().zip(&v))
                .all(|((_, _, p), (a, b))| p.shape() == a.shape() && p.shape() == b.shape());
        if !ok {
            return Err(crate::Error::contract("optimizer state does not match parameters"));
        }
        Ok(AdamState { config, step, m, v })
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            clip_norm,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let clip = match clip_norm {
            Some(max) => {
                let n = grads.global_norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let ids: Vec<_> = params.ids().collect();
        for pid in ids {
            let i = pid.index();
            let p = params.get_mut(pid).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            match grads.get(pid) {
                Some(g) => {
                    for j in 0..p.len() {
                        let gj = g.data()[j] * clip;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                    }
                }
                None => {
                    for j in 0..p.len() {
                        m[j] *= beta1;
                        v[j] *= beta2;
                    }
                }
            }
            for j in 0..p.len() {
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[j]);
            }
        }
    }
}
