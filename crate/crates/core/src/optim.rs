//! Adam over lists of parameter matrices.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.lr > 0.0, || "learning rate must be > 0".into())?;
        ensure((0.0..1.0).contains(&self.beta1), || "beta1 must be in [0, 1)".into())?;
        ensure((0.0..1.0).contains(&self.beta2), || "beta2 must be in [0, 1)".into())?;
        ensure(self.eps > 0.0, || "eps must be > 0".into())
    }
}

/// Moment estimates for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Mat]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        // shapes may have changed after domain expansion
        for (i, p) in params.iter().enumerate() {
            if self.m[i].dim() != p.dim() {
                self.m[i] = Mat::zeros(p.dim());
                self.v[i] = Mat::zeros(p.dim());
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let step = lr * bc2.sqrt() / bc1;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}
