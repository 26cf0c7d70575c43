//! One MCMC state and chain initialisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{BetaDist, Normal1};
use crate::error::{Error, Result};
use crate::hyper::Hyperparameters;

/// Likelihood structure used by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Latent pair means between observations and regression.
    #[default]
    Esabre,
    /// Observations regressed directly on the pair design, noise variance
    /// `sigma_eps2`. States still carry `mu_y = X* w*` and
    /// `sigma_y2 = sigma_eps2` so that downstream scoring is uniform.
    SabreFlat,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esabre" => Ok(Mode::Esabre),
            "sabre_flat" => Ok(Mode::SabreFlat),
            other => Err(Error::Config(format!("unknown mode `{other}` (esabre | sabre_flat)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub mu_y: Vec<f64>,
    pub w0: f64,
    /// Length `J`; exactly zero where `gamma` is false.
    pub w: Vec<f64>,
    pub gamma: Vec<bool>,
    pub mu_w: f64,
    pub sigma_y2: f64,
    pub sigma_eps2: f64,
    pub sigma_w2: f64,
    pub b: Vec<f64>,
    pub sigma_b2: Vec<f64>,
    pub pi: f64,
}

impl ModelState {
    pub fn n_included(&self) -> usize {
        self.gamma.iter().filter(|&&g| g).count()
    }

    pub fn included(&self) -> Vec<usize> {
        self.gamma
            .iter()
            .enumerate()
            .filter_map(|(j, &g)| g.then_some(j))
            .collect()
    }

    /// `x_p' w*` for pair `p`.
    pub fn linear_predictor(&self, data: &Dataset, p: usize) -> f64 {
        let x = &data.design;
        self.w0
            + self
                .w
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(j, &w)| x.var(p, j) * w)
                .sum::<f64>()
    }

    pub fn linear_predictors(&self, data: &Dataset) -> Vec<f64> {
        (0..data.n_pairs()).map(|p| self.linear_predictor(data, p)).collect()
    }

    pub fn check(&self, data: &Dataset) -> Result<()> {
        let bad = |m: &str| Err(Error::Numerical(format!("invalid state: {m}")));
        if self.mu_y.len() != data.n_pairs() || self.w.len() != data.n_vars() {
            return bad("dimension mismatch");
        }
        if self.gamma.len() != self.w.len() || self.b.len() != data.n_coefs() {
            return bad("dimension mismatch");
        }
        if self.gamma.iter().zip(&self.w).any(|(&g, &w)| !g && w != 0.0) {
            return bad("excluded coefficient is nonzero");
        }
        let vars = [self.sigma_y2, self.sigma_eps2, self.sigma_w2];
        if vars.iter().chain(&self.sigma_b2).any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("variance not positive");
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return bad("pi outside (0, 1)");
        }
        Ok(())
    }

    /// Overdispersed starting state for one chain.
    ///
    /// Variances are drawn log-uniformly on `[0.01, 10]`: draws from the
    /// default vague inverse-gamma priors overflow to infinity.
    pub fn init<R: Rng + ?Sized>(data: &Dataset, hyper: &Hyperparameters, rng: &mut R) -> Self {
        let mut mu_y = vec![0.0; data.n_pairs()];
        for (p, rows) in data.pair_obs().iter().enumerate() {
            mu_y[p] = rows.iter().map(|&i| data.obs.y[i]).sum::<f64>() / rows.len() as f64;
        }
        let w0 = data.obs.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut log_uniform = || (rng.random_range(0.01f64.ln()..10f64.ln())).exp();
        let sigma_y2 = log_uniform();
        let sigma_eps2 = log_uniform();
        let sigma_w2 = log_uniform();
        let sigma_b2: Vec<f64> = (0..data.n_factors()).map(|_| log_uniform()).collect();
        let gamma: Vec<bool> = (0..data.n_vars()).map(|_| rng.random_bool(0.5)).collect();
        let pi = BetaDist::new(hyper.alpha_pi, hyper.beta_pi).sample(rng);
        let mu_w = Normal1::new(hyper.mu0, hyper.sigma0_2 * sigma_eps2).sample(rng);
        let w = gamma.iter().map(|&g| if g { mu_w } else { 0.0 }).collect();
        Self {
            mu_y,
            w0,
            w,
            gamma,
            mu_w,
            sigma_y2,
            sigma_eps2,
            sigma_w2,
            b: vec![0.0; data.n_coefs()],
            sigma_b2,
            pi,
        }
    }
}
