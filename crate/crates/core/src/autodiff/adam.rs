use serde::{Deserialize, Serialize};

use crate::autodiff::params::{ParamGroup, ParamStore};
use crate::li::clamp_unit;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, epsilon: 0.01, beta1: 0.9, beta2: 0.999 }
    }
}

/// Moments are held in `f64` regardless of the parameter precision.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState { config, step: 0, v: m.clone(), m }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    /// One bias-corrected Adam update of every non-frozen parameter, then the
    /// `[0, 1]` projection of every LI-weight parameter.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let AdamConfig { lr, epsilon, beta1, beta2 } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.param_mut(id);
            if !p.frozen {
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                let grad = p.grad.data();
                let value = p.value.data_mut();
                for j in 0..value.len() {
                    let g = grad[j].as_f64();
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    let delta = lr * mhat / (vhat.sqrt() + epsilon);
                    if delta != 0.0 {
                        value[j] = T::from_f64(value[j].as_f64() - delta);
                    }
                }
            }
            if p.group == ParamGroup::LiWeights {
                project(&mut p.value);
            }
        }
    }
}

fn project<T: Scalar>(t: &mut Tensor4<T>) {
    for w in t.data_mut() {
        *w = clamp_unit(*w);
    }
}
