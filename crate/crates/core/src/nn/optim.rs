use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
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

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only;
/// biases, norms and positional tables are left alone.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: i32,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &ParamStore<F>) {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let bc1 = F::c(1.0 - c.beta1.powi(self.t));
        let bc2 = F::c(1.0 - c.beta2.powi(self.t));
        let lr = F::c(c.lr);
        let eps = F::c(c.eps);
        let decay = F::one() - F::c(c.lr * c.weight_decay);
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for (((p, (_, g)), (m, v)), name) in params
            .tensors_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(names)
        {
            let decayed = p.ndim() >= 2 && !name.ends_with("pos");
            let p = p.as_slice_mut().expect("parameters are contiguous");
            let g = g.as_slice().expect("gradients are contiguous");
            let m = m.as_slice_mut().expect("contiguous");
            let v = v.as_slice_mut().expect("contiguous");
            for i in 0..p.len() {
                if decayed {
                    p[i] *= decay;
                }
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
