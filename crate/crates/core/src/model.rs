//! Log joint density of the full model and the pair-marginal likelihood.

use crate::data::Dataset;
use crate::dist::{ln_bernoulli, ln_beta_pdf, ln_inv_gamma, ln_normal};
use crate::hyper::Hyperparameters;
use crate::state::{Mode, ModelState};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln N(r | 0, a I + c 11')` via Sherman-Morrison.
pub fn ln_compound_symmetric_normal(resid: &[f64], a: f64, c: f64) -> f64 {
    let n = resid.len() as f64;
    let s: f64 = resid.iter().sum();
    let ss: f64 = resid.iter().map(|r| r * r).sum();
    let denom = a + n * c;
    let quad = (ss - c * s * s / denom) / a;
    let logdet = (n - 1.0) * a.ln() + denom.ln();
    -0.5 * (n * LN_2PI + logdet + quad)
}

/// Prior terms shared by both modes (everything except likelihood and the
/// `sigma_y2` prior).
fn ln_prior(data: &Dataset, hyper: &Hyperparameters, s: &ModelState) -> f64 {
    let se2 = s.sigma_eps2;
    let mut lp = ln_normal(s.w0, hyper.mu_w0, hyper.sigma_w0_2 * se2);
    lp += ln_normal(s.mu_w, hyper.mu0, hyper.sigma0_2 * se2);
    for (j, &g) in s.gamma.iter().enumerate() {
        lp += ln_bernoulli(g, s.pi);
        if g {
            lp += ln_normal(s.w[j], s.mu_w, s.sigma_w2 * se2);
        }
    }
    lp += ln_beta_pdf(s.pi, hyper.alpha_pi, hyper.beta_pi);
    lp += ln_inv_gamma(se2, hyper.alpha_eps, hyper.beta_eps);
    lp += ln_inv_gamma(s.sigma_w2, hyper.alpha_w, hyper.beta_w);
    let factor_of = data.layout.factor_of_coef();
    for (c, &b) in s.b.iter().enumerate() {
        lp += ln_normal(b, 0.0, s.sigma_b2[factor_of[c]]);
    }
    for (k, &v) in s.sigma_b2.iter().enumerate() {
        lp += ln_inv_gamma(v, hyper.alpha_b[k], hyper.beta_b[k]);
    }
    lp
}

/// Log of the full joint density of data and all parameters.
///
/// In `Esabre` mode this is the observation likelihood given latent pair
/// means, the latent regression, and every prior. In `SabreFlat` mode the
/// observations are regressed on the design with noise variance
/// `sigma_eps2`; `mu_y` and `sigma_y2` play no part.
pub fn log_joint(data: &Dataset, hyper: &Hyperparameters, s: &ModelState, mode: Mode) -> f64 {
    let y = &data.obs.y;
    let pid = &data.obs.pair_id;
    let mut lp = ln_prior(data, hyper, s);
    match mode {
        Mode::Esabre => {
            for (i, &yi) in y.iter().enumerate() {
                lp += ln_normal(yi, s.mu_y[pid[i]] + data.zb(i, &s.b), s.sigma_y2);
            }
            for p in 0..data.n_pairs() {
                lp += ln_normal(s.mu_y[p], s.linear_predictor(data, p), s.sigma_eps2);
            }
            lp += ln_inv_gamma(s.sigma_y2, hyper.alpha_y, hyper.beta_y);
        }
        Mode::SabreFlat => {
            let eta = s.linear_predictors(data);
            for (i, &yi) in y.iter().enumerate() {
                lp += ln_normal(yi, eta[pid[i]] + data.zb(i, &s.b), s.sigma_eps2);
            }
        }
    }
    lp
}

/// `ln p(y | w*, gamma, b, sigma_y2, sigma_eps2)` with every latent pair mean
/// integrated out.
pub fn log_lik_integrated(data: &Dataset, s: &ModelState) -> f64 {
    let mut buf = Vec::new();
    (0..data.n_pairs())
        .map(|p| {
            pair_residuals(data, s, p, &mut buf);
            ln_compound_symmetric_normal(&buf, s.sigma_y2, s.sigma_eps2)
        })
        .sum()
}

/// `ln p(y | w*, gamma, b)` under the flat likelihood with noise `noise_var`.
pub fn log_lik_flat(data: &Dataset, s: &ModelState, noise_var: f64) -> f64 {
    let eta = s.linear_predictors(data);
    data.obs
        .y
        .iter()
        .enumerate()
        .map(|(i, &yi)| ln_normal(yi, eta[data.obs.pair_id[i]] + data.zb(i, &s.b), noise_var))
        .sum()
}

/// Fills `out` with `y_i - x_p'w* - z_i'b` for the observations of pair `p`.
pub(crate) fn pair_residuals(data: &Dataset, s: &ModelState, p: usize, out: &mut Vec<f64>) {
    let eta = s.linear_predictor(data, p);
    out.clear();
    out.extend(data.pair_obs()[p].iter().map(|&i| data.obs.y[i] - eta - data.zb(i, &s.b)));
}
