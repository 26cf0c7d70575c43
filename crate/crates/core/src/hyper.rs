//! Fixed prior constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All fixed prior constants. Variances of the regression priors are scaled
/// by `sigma_eps2` inside the model: `w0 ~ N(mu_w0, sigma_w0_2 * sigma_eps2)`,
/// `mu_w ~ N(mu0, sigma0_2 * sigma_eps2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub alpha_y: f64,
    pub beta_y: f64,
    pub alpha_eps: f64,
    pub beta_eps: f64,
    pub alpha_w: f64,
    pub beta_w: f64,
    pub mu0: f64,
    pub sigma0_2: f64,
    pub mu_w0: f64,
    pub sigma_w0_2: f64,
    pub alpha_pi: f64,
    pub beta_pi: f64,
    /// Per-factor inverse-gamma shape; a single entry is broadcast.
    pub alpha_b: Vec<f64>,
    /// Per-factor inverse-gamma scale; a single entry is broadcast.
    pub beta_b: Vec<f64>,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self::defaults(1)
    }
}

impl Hyperparameters {
    /// Vague defaults for `k` random-effect factors.
    pub fn defaults(k: usize) -> Self {
        Self {
            alpha_y: 1e-3,
            beta_y: 1e-3,
            alpha_eps: 1e-3,
            beta_eps: 1e-3,
            alpha_w: 1e-3,
            beta_w: 1e-3,
            mu0: 0.0,
            sigma0_2: 100.0,
            mu_w0: 0.0,
            sigma_w0_2: 1e6,
            alpha_pi: 1.0,
            beta_pi: 4.0,
            alpha_b: vec![1e-3; k],
            beta_b: vec![1e-3; k],
        }
    }

    /// Returns a copy whose per-factor vectors have exactly `k` entries.
    pub fn for_factors(&self, k: usize) -> Result<Self> {
        let fit = |v: &[f64], name: &str| -> Result<Vec<f64>> {
            match v.len() {
                n if n == k => Ok(v.to_vec()),
                1 => Ok(vec![v[0]; k]),
                0 if k == 0 => Ok(Vec::new()),
                n => Err(Error::Config(format!(
                    "{name} has {n} entries but the model has {k} random-effect factors"
                ))),
            }
        };
        let mut h = self.clone();
        h.alpha_b = fit(&self.alpha_b, "alpha_b")?;
        h.beta_b = fit(&self.beta_b, "beta_b")?;
        Ok(h)
    }

    /// Keeps the per-factor entries of the listed factors.
    pub fn select_factors(&self, keep: &[usize]) -> Self {
        let mut h = self.clone();
        h.alpha_b = keep.iter().map(|&k| self.alpha_b[k]).collect();
        h.beta_b = keep.iter().map(|&k| self.beta_b[k]).collect();
        h
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_y", self.alpha_y),
            ("beta_y", self.beta_y),
            ("alpha_eps", self.alpha_eps),
            ("beta_eps", self.beta_eps),
            ("alpha_w", self.alpha_w),
            ("beta_w", self.beta_w),
            ("sigma0_2", self.sigma0_2),
            ("sigma_w0_2", self.sigma_w0_2),
            ("alpha_pi", self.alpha_pi),
            ("beta_pi", self.beta_pi),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("mu0", self.mu0), ("mu_w0", self.mu_w0)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("hyperparameter {name} must be finite")));
            }
        }
        if self.alpha_b.len() != self.beta_b.len() {
            return Err(Error::Config("alpha_b and beta_b differ in length".into()));
        }
        for (k, (&a, &b)) in self.alpha_b.iter().zip(&self.beta_b).enumerate() {
            if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!(
                    "random-effect factor {k}: alpha_b/beta_b must be positive"
                )));
            }
        }
        Ok(())
    }
}
