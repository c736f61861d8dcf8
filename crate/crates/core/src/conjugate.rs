//! One-dimensional linear-Gaussian model with closed-form likelihood and
//! posterior: `z ~ N(0, 1)`, `x | z ~ N(w·z + b, s²)`. Used to check ELBO
//! computations against exact answers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::losses::kl_gaussian_std;
use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub w: f64,
    pub b: f64,
    /// Observation noise standard deviation `s`.
    pub noise: f64,
}

/// A Gaussian `N(mean, sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normal1 {
    pub mean: f64,
    pub sd: f64,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
}

impl LinearGaussian {
    pub fn new(w: f64, b: f64, noise: f64) -> Result<Self> {
        ensure(noise > 0.0 && w.is_finite() && b.is_finite(), || {
            "noise must be positive and parameters finite".into()
        })?;
        Ok(Self { w, b, noise })
    }

    /// `log p(x) = log N(x; b, w² + s²)`.
    pub fn log_likelihood(&self, x: f64) -> f64 {
        log_normal(x, self.b, self.w * self.w + self.noise * self.noise)
    }

    /// Exact posterior `p(z | x)`.
    pub fn posterior(&self, x: f64) -> Normal1 {
        let s2 = self.noise * self.noise;
        let denom = self.w * self.w + s2;
        Normal1 {
            mean: self.w * (x - self.b) / denom,
            sd: (s2 / denom).sqrt(),
        }
    }

    /// `E_q[log p(x|z)] − KL(q ‖ N(0, 1))` for `q = N(m, v)`.
    pub fn elbo(&self, x: f64, q: Normal1) -> Result<f64> {
        ensure(q.sd > 0.0, || "variational sd must be positive".into())?;
        let s2 = self.noise * self.noise;
        let v = q.sd * q.sd;
        let r = x - self.w * q.mean - self.b;
        let expected = -0.5 * (2.0 * PI * s2).ln() - (r * r + self.w * self.w * v) / (2.0 * s2);
        let kl = kl_gaussian_std(&Mat::from_elem((1, 1), q.mean), &Mat::from_elem((1, 1), q.sd))?;
        Ok(expected - kl)
    }

    /// Two-source ELBO: sum of per-sample ELBOs over current and replayed
    /// observations.
    pub fn elbo_two_source(&self, current: &[(f64, Normal1)], replay: &[(f64, Normal1)]) -> Result<f64> {
        current.iter().chain(replay).map(|&(x, q)| self.elbo(x, q)).sum()
    }

    /// Exact log-likelihood of both sources.
    pub fn joint_log_likelihood(&self, current: &[f64], replay: &[f64]) -> f64 {
        current.iter().chain(replay).map(|&x| self.log_likelihood(x)).sum()
    }
}

/// `KL(N(m₁, s₁²) ‖ N(m₂, s₂²))`.
pub fn kl_normal(p: Normal1, q: Normal1) -> f64 {
    (q.sd / p.sd).ln() + (p.sd * p.sd + (p.mean - q.mean).powi(2)) / (2.0 * q.sd * q.sd) - 0.5
}
