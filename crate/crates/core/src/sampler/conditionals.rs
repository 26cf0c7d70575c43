//! Full conditional distributions. Each returns the distribution so that the
//! sweep can sample from it and tests can evaluate its density.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::dist::{BetaDist, InvGamma, Normal1};
use crate::error::Result;
use crate::hyper::Hyperparameters;
use crate::linalg::PrecisionGaussian;
use crate::state::{Mode, ModelState};

/// Independent per-pair conditionals of the latent means.
pub fn mu_y_conditional(s: &ModelState, data: &Dataset) -> Vec<Normal1> {
    data.pair_obs()
        .iter()
        .enumerate()
        .map(|(p, rows)| {
            let sum: f64 = rows.iter().map(|&i| data.obs.y[i] - data.zb(i, &s.b)).sum();
            let v = 1.0 / (1.0 / s.sigma_eps2 + rows.len() as f64 / s.sigma_y2);
            let eta = s.linear_predictor(data, p);
            Normal1::new(v * (sum / s.sigma_y2 + eta / s.sigma_eps2), v)
        })
        .collect()
}

/// Regression target of the fixed effects: `mu_y` (one entry per pair) or
/// `y - Zb` (one per observation).
pub fn regression_target(s: &ModelState, data: &Dataset, mode: Mode) -> Vec<f64> {
    match mode {
        Mode::Esabre => s.mu_y.clone(),
        Mode::SabreFlat => (0..data.n_obs()).map(|i| data.obs.y[i] - data.zb(i, &s.b)).collect(),
    }
}

/// Conditional of `(w0, w_S)` given `gamma`, `mu_w`, `sigma_eps2`, `sigma_w2`
/// and the regression target. Covariance `sigma_eps2 * V_w`.
pub fn w_star_conditional(
    s: &ModelState,
    data: &Dataset,
    hyper: &Hyperparameters,
    mode: Mode,
) -> Result<PrecisionGaussian> {
    let target = regression_target(s, data, mode);
    let inc = s.included();
    let k = inc.len();
    let x = &data.design;
    let row_of = |i: usize| match mode {
        Mode::Esabre => i,
        Mode::SabreFlat => data.obs.pair_id[i],
    };
    let mut prec = DMatrix::zeros(k + 1, k + 1);
    let mut lin = DVector::zeros(k + 1);
    let mut row = vec![0.0; k + 1];
    for (i, &t) in target.iter().enumerate() {
        let p = row_of(i);
        row[0] = 1.0;
        for (c, &j) in inc.iter().enumerate() {
            row[c + 1] = x.var(p, j);
        }
        for a in 0..=k {
            if row[a] == 0.0 {
                continue;
            }
            lin[a] += row[a] * t;
            for b in 0..=k {
                prec[(a, b)] += row[a] * row[b];
            }
        }
    }
    prec[(0, 0)] += 1.0 / hyper.sigma_w0_2;
    lin[0] += hyper.mu_w0 / hyper.sigma_w0_2;
    for c in 1..=k {
        prec[(c, c)] += 1.0 / s.sigma_w2;
        lin[c] += s.mu_w / s.sigma_w2;
    }
    PrecisionGaussian::from_canonical(prec, lin, s.sigma_eps2, "w* posterior precision")
}

/// Joint conditional of all random-effect coefficients. The residual is
/// `y - M mu_y` with noise `sigma_y2` (latent) or `y - M X* w*` with noise
/// `sigma_eps2` (flat).
pub fn b_conditional(s: &ModelState, data: &Dataset, mode: Mode) -> Result<PrecisionGaussian> {
    let nb = data.n_coefs();
    let (noise, centre): (f64, Vec<f64>) = match mode {
        Mode::Esabre => (s.sigma_y2, s.mu_y.clone()),
        Mode::SabreFlat => (s.sigma_eps2, s.linear_predictors(data)),
    };
    let mut prec = DMatrix::zeros(nb, nb);
    let mut lin = DVector::zeros(nb);
    let idx = data.coef_index();
    let mut coefs = Vec::with_capacity(idx.len());
    for i in 0..data.n_obs() {
        coefs.clear();
        coefs.extend(idx.iter().map(|col| col[i]));
        let r = data.obs.y[i] - centre[data.obs.pair_id[i]];
        for &a in &coefs {
            lin[a] += r / noise;
            for &b in &coefs {
                prec[(a, b)] += 1.0 / noise;
            }
        }
    }
    for (c, k) in data.layout.factor_of_coef().into_iter().enumerate() {
        prec[(c, c)] += 1.0 / s.sigma_b2[k];
    }
    PrecisionGaussian::from_canonical(prec, lin, 1.0, "random-effects posterior precision")
}

/// `sigma_y2 ~ IG(N/2 + alpha_y, beta_y + e'e/2)`, `e = y - M mu_y - Zb`.
pub fn sigma_y2_conditional(s: &ModelState, data: &Dataset, hyper: &Hyperparameters) -> InvGamma {
    let ee: f64 = (0..data.n_obs())
        .map(|i| {
            let e = data.obs.y[i] - s.mu_y[data.obs.pair_id[i]] - data.zb(i, &s.b);
            e * e
        })
        .sum();
    InvGamma::new(data.n_obs() as f64 / 2.0 + hyper.alpha_y, hyper.beta_y + ee / 2.0)
}

/// `sigma_w2 ~ IG(|gamma|/2 + alpha_w, beta_w + sum (w_j - mu_w)^2 / (2 sigma_eps2))`.
pub fn sigma_w2_conditional(s: &ModelState, hyper: &Hyperparameters) -> InvGamma {
    let inc = s.included();
    let ss: f64 = inc.iter().map(|&j| (s.w[j] - s.mu_w).powi(2)).sum();
    InvGamma::new(
        inc.len() as f64 / 2.0 + hyper.alpha_w,
        hyper.beta_w + ss / (2.0 * s.sigma_eps2),
    )
}

/// Per-factor `sigma_b2_k ~ IG(G_k/2 + alpha_b, beta_b + b_k'b_k/2)`.
pub fn sigma_b2_conditional(s: &ModelState, data: &Dataset, hyper: &Hyperparameters) -> Vec<InvGamma> {
    let offs = data.layout.offsets();
    data.layout
        .sizes
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let bb: f64 = s.b[offs[k]..offs[k] + g].iter().map(|v| v * v).sum();
            InvGamma::new(g as f64 / 2.0 + hyper.alpha_b[k], hyper.beta_b[k] + bb / 2.0)
        })
        .collect()
}

/// Uncollapsed `sigma_eps2` conditional given all regression parameters.
pub fn sigma_eps2_conditional(
    s: &ModelState,
    data: &Dataset,
    hyper: &Hyperparameters,
    mode: Mode,
) -> InvGamma {
    let eta = s.linear_predictors(data);
    let (n, mut r) = match mode {
        Mode::Esabre => (
            data.n_pairs(),
            s.mu_y.iter().zip(&eta).map(|(m, e)| (m - e).powi(2)).sum::<f64>(),
        ),
        Mode::SabreFlat => (
            data.n_obs(),
            (0..data.n_obs())
                .map(|i| (data.obs.y[i] - eta[data.obs.pair_id[i]] - data.zb(i, &s.b)).powi(2))
                .sum::<f64>(),
        ),
    };
    let inc = s.included();
    r += (s.w0 - hyper.mu_w0).powi(2) / hyper.sigma_w0_2;
    r += inc.iter().map(|&j| (s.w[j] - s.mu_w).powi(2)).sum::<f64>() / s.sigma_w2;
    r += (s.mu_w - hyper.mu0).powi(2) / hyper.sigma0_2;
    let shape = (n + inc.len() + 2) as f64 / 2.0 + hyper.alpha_eps;
    InvGamma::new(shape, hyper.beta_eps + r / 2.0)
}

/// Uncollapsed `mu_w` conditional given the included coefficients.
pub fn mu_w_conditional(s: &ModelState, hyper: &Hyperparameters) -> Normal1 {
    let inc = s.included();
    let v = 1.0 / (1.0 / hyper.sigma0_2 + inc.len() as f64 / s.sigma_w2);
    let sum: f64 = inc.iter().map(|&j| s.w[j]).sum();
    Normal1::new(v * (sum / s.sigma_w2 + hyper.mu0 / hyper.sigma0_2), s.sigma_eps2 * v)
}

/// `pi ~ Beta(alpha_pi + |gamma|, beta_pi + J - |gamma|)`.
pub fn pi_conditional(s: &ModelState, hyper: &Hyperparameters) -> BetaDist {
    let on = s.n_included() as f64;
    let off = s.gamma.len() as f64 - on;
    BetaDist::new(hyper.alpha_pi + on, hyper.beta_pi + off)
}
