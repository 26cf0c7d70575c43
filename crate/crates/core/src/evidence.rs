//! Collapsed marginal densities for the inclusion indicators.
//!
//! Given `gamma` with included set `S` (`k = |S|`), the regression target `t`
//! (latent pair means, or `y - Zb` expanded per observation in flat mode) is
//! written as `t = A theta + e` with `A = [1, X_S, X_S 1]`,
//! `theta = (w0, u, mu_w)`, `w_S = mu_w + u`, prior
//! `theta ~ N(m, sigma^2 D)`, `D = diag(sigma_w0^2, sigma_w^2 I_k, sigma_0^2)`,
//! `m = (mu_w0, 0, mu_0)` and `e ~ N(0, sigma^2 I)`. Integrating `theta` and
//! `sigma^2 ~ IG(alpha, beta)` leaves a multivariate t evidence in
//! `C = I + A D A'`, evaluated either on the `(k+2)`-dimensional inner matrix
//! `Lambda = D^-1 + A'A` (Woodbury) or on `C` directly.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairDesign};
use crate::dist::{ln_beta, ln_gamma_fn, log_sum_exp};
use crate::error::Result;
use crate::hyper::Hyperparameters;
use crate::linalg::{cholesky, ln_det, PrecisionGaussian};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How the flat-mode evidence is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvidencePath {
    /// Factorise the full `n x n` covariance, as the original flat sampler does.
    #[default]
    Dense,
    /// Matrix-determinant lemma and Woodbury identity on the inner matrix.
    Woodbury,
}

/// Gram matrix of the augmented design `[1, X]`, weighted by how many target
/// entries each pair contributes.
#[derive(Debug, Clone)]
pub struct Gram(DMatrix<f64>);

impl Gram {
    /// One row per pair.
    pub fn latent(design: &PairDesign) -> Self {
        Self(design.x.transpose() * &design.x)
    }

    /// One row per observation (rows of the pair design repeated through `M`).
    pub fn flat(data: &Dataset) -> Self {
        let x = &data.design.x;
        let counts = data.incidence_counts();
        let mut g = DMatrix::zeros(x.ncols(), x.ncols());
        for (p, &c) in counts.iter().enumerate() {
            let row = x.row(p);
            g.ger(c as f64, &row.transpose(), &row.transpose(), 1.0);
        }
        Self(g)
    }
}

/// Everything the collapsed evaluations need besides `gamma`.
pub struct CollapsedContext<'a> {
    design: &'a PairDesign,
    /// Flat mode: pair of each target entry. `None` for latent targets.
    rows: Option<&'a [usize]>,
    gram: &'a Gram,
    /// Target shifted by the intercept prior mean.
    t: Vec<f64>,
    xt: DVector<f64>,
    tt: f64,
    alpha: f64,
    beta: f64,
    mu0: f64,
    mu_w0: f64,
    sigma0_2: f64,
    sigma_w0_2: f64,
    sigma_w2: f64,
    alpha_pi: f64,
    beta_pi: f64,
    path: EvidencePath,
}

impl<'a> CollapsedContext<'a> {
    /// Latent-mean target: one entry per pair.
    pub fn latent(
        design: &'a PairDesign,
        gram: &'a Gram,
        hyper: &Hyperparameters,
        mu_y: &[f64],
        sigma_w2: f64,
    ) -> Self {
        assert_eq!(mu_y.len(), design.n_pairs());
        Self::build(design, None, gram, hyper, mu_y, sigma_w2, EvidencePath::Woodbury)
    }

    /// Flat target `y - Zb`, one entry per observation; `rows[i]` is the pair
    /// of observation `i`.
    pub fn flat(
        design: &'a PairDesign,
        rows: &'a [usize],
        gram: &'a Gram,
        hyper: &Hyperparameters,
        target: &[f64],
        sigma_w2: f64,
        path: EvidencePath,
    ) -> Self {
        assert_eq!(rows.len(), target.len());
        Self::build(design, Some(rows), gram, hyper, target, sigma_w2, path)
    }

    fn build(
        design: &'a PairDesign,
        rows: Option<&'a [usize]>,
        gram: &'a Gram,
        hyper: &Hyperparameters,
        target: &[f64],
        sigma_w2: f64,
        path: EvidencePath,
    ) -> Self {
        let t: Vec<f64> = target.iter().map(|v| v - hyper.mu_w0).collect();
        let width = design.x.ncols();
        let mut xt = DVector::zeros(width);
        for (i, &ti) in t.iter().enumerate() {
            let p = rows.map_or(i, |r| r[i]);
            for c in 0..width {
                xt[c] += design.x[(p, c)] * ti;
            }
        }
        let tt = t.iter().map(|v| v * v).sum();
        Self {
            design,
            rows,
            gram,
            t,
            xt,
            tt,
            alpha: hyper.alpha_eps,
            beta: hyper.beta_eps,
            mu0: hyper.mu0,
            mu_w0: hyper.mu_w0,
            sigma0_2: hyper.sigma0_2,
            sigma_w0_2: hyper.sigma_w0_2,
            sigma_w2,
            alpha_pi: hyper.alpha_pi,
            beta_pi: hyper.beta_pi,
            path,
        }
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn n_vars(&self) -> usize {
        self.design.n_vars()
    }

    pub fn is_flat(&self) -> bool {
        self.rows.is_some()
    }

    fn prior_diag(&self, k: usize) -> Vec<f64> {
        let mut d = Vec::with_capacity(k + 2);
        d.push(self.sigma_w0_2);
        d.extend(std::iter::repeat_n(self.sigma_w2, k));
        d.push(self.sigma0_2);
        d
    }

    /// Inner precision `Lambda`, `A't~` and `r'r` for the included set, where
    /// `r = t~ - A m'` and `m' = (0, 0, mu_0)`.
    fn inner(&self, s: &[usize]) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
        let k = s.len();
        let g = &self.gram.0;
        let idx: Vec<usize> = std::iter::once(0).chain(s.iter().map(|&j| j + 1)).collect();
        let d = k + 2;
        let mut ata = DMatrix::zeros(d, d);
        for a in 0..=k {
            for b in 0..=k {
                ata[(a, b)] = g[(idx[a], idx[b])];
            }
            let cross: f64 = s.iter().map(|&j| g[(idx[a], j + 1)]).sum();
            ata[(a, k + 1)] = cross;
            ata[(k + 1, a)] = cross;
        }
        ata[(d - 1, d - 1)] = s
            .iter()
            .map(|&i| s.iter().map(|&j| g[(i + 1, j + 1)]).sum::<f64>())
            .sum();
        let mut at = DVector::zeros(d);
        for a in 0..=k {
            at[a] = self.xt[idx[a]];
        }
        at[d - 1] = s.iter().map(|&j| self.xt[j + 1]).sum();
        let atr = &at - ata.column(d - 1) * self.mu0;
        let rr = self.tt - 2.0 * self.mu0 * at[d - 1] + self.mu0 * self.mu0 * ata[(d - 1, d - 1)];
        let mut lambda = ata;
        for (i, v) in self.prior_diag(k).into_iter().enumerate() {
            lambda[(i, i)] += 1.0 / v;
        }
        (lambda, at, atr, rr)
    }

    /// `(Q, ln|C|)` through the inner matrix.
    fn quad_logdet_woodbury(&self, s: &[usize]) -> Result<(f64, f64)> {
        let (lambda, _, atr, rr) = self.inner(s);
        let chol = cholesky(lambda, "collapsed inner matrix")?;
        let q = rr - atr.dot(&chol.solve(&atr));
        let ln_d: f64 = self.prior_diag(s.len()).iter().map(|v| v.ln()).sum();
        Ok((q.max(0.0), ln_d + ln_det(&chol)))
    }

    /// `(Q, ln|C|)` from the full covariance.
    fn quad_logdet_dense(&self, s: &[usize]) -> Result<(f64, f64)> {
        let n = self.n();
        let k = s.len();
        let d = self.prior_diag(k);
        let mut a = DMatrix::zeros(n, k + 2);
        for i in 0..n {
            let p = self.rows.map_or(i, |r| r[i]);
            a[(i, 0)] = 1.0;
            let mut sum = 0.0;
            for (c, &j) in s.iter().enumerate() {
                let x = self.design.var(p, j);
                a[(i, c + 1)] = x;
                sum += x;
            }
            a[(i, k + 1)] = sum;
        }
        let mut m = DVector::zeros(k + 2);
        m[k + 1] = self.mu0;
        let r = DVector::from_column_slice(&self.t) - &a * m;
        let ad = DMatrix::from_fn(n, k + 2, |i, c| a[(i, c)] * d[c]);
        let mut cov = &ad * a.transpose();
        for i in 0..n {
            cov[(i, i)] += 1.0;
        }
        let chol = cholesky(cov, "collapsed covariance")?;
        let q = r.dot(&chol.solve(&r));
        Ok((q, ln_det(&chol)))
    }

    fn quad_logdet(&self, s: &[usize]) -> Result<(f64, f64)> {
        match self.path {
            EvidencePath::Woodbury => self.quad_logdet_woodbury(s),
            EvidencePath::Dense => self.quad_logdet_dense(s),
        }
    }

    /// `ln p(t | gamma, sigma_w2)` with `w*`, `mu_w` and `sigma_eps2` integrated.
    pub fn log_evidence(&self, gamma: &[bool]) -> Result<f64> {
        let s = included(gamma);
        let (q, logdet) = self.quad_logdet(&s)?;
        Ok(t_evidence(self.n(), q, logdet, self.alpha, self.beta))
    }

    /// Same as [`log_evidence`](Self::log_evidence) but forces a path, for
    /// cross-checks.
    pub fn log_evidence_with(&self, gamma: &[bool], path: EvidencePath) -> Result<f64> {
        let s = included(gamma);
        let (q, logdet) = match path {
            EvidencePath::Woodbury => self.quad_logdet_woodbury(&s)?,
            EvidencePath::Dense => self.quad_logdet_dense(&s)?,
        };
        Ok(t_evidence(self.n(), q, logdet, self.alpha, self.beta))
    }

    /// Posterior of `(sigma_eps2, theta)` given `gamma` and the target.
    pub fn posterior(&self, gamma: &[bool]) -> Result<CollapsedPosterior> {
        let s = included(gamma);
        let k = s.len();
        let (lambda, at, atr, rr) = self.inner(&s);
        let chol = cholesky(lambda.clone(), "collapsed inner matrix")?;
        let q = (rr - atr.dot(&chol.solve(&atr))).max(0.0);
        let mut linear = at;
        linear[k + 1] += self.mu0 / self.sigma0_2;
        Ok(CollapsedPosterior {
            shape: self.alpha + self.n() as f64 / 2.0,
            scale: self.beta + q / 2.0,
            theta: PrecisionGaussian::from_canonical(lambda, linear, 1.0, "collapsed inner matrix")?,
            mu_w0: self.mu_w0,
        })
    }
}

/// `sigma_eps2 | gamma, t ~ IG(shape, scale)` and
/// `theta | sigma_eps2, gamma, t ~ N(mean, sigma_eps2 Lambda^-1)`, with
/// `theta = (w0 - mu_w0, u, mu_w)`.
pub struct CollapsedPosterior {
    pub shape: f64,
    pub scale: f64,
    pub theta: PrecisionGaussian,
    mu_w0: f64,
}

impl CollapsedPosterior {
    /// Mean and variance factor of `mu_w` given `sigma_eps2`:
    /// `mu_w ~ N(mean, sigma_eps2 * factor)`.
    pub fn mu_w_moments(&self) -> (f64, f64) {
        let d = self.theta.dim();
        (self.theta.mean[d - 1], self.theta.covariance()[(d - 1, d - 1)])
    }

    /// Posterior mean of `w0` (independent of `sigma_eps2`).
    pub fn w0_mean(&self) -> f64 {
        self.theta.mean[0] + self.mu_w0
    }
}

fn included(gamma: &[bool]) -> Vec<usize> {
    gamma
        .iter()
        .enumerate()
        .filter_map(|(j, &g)| g.then_some(j))
        .collect()
}

/// Multivariate t evidence: `ln` of
/// `int N(t | mu, sigma^2 C) IG(sigma^2 | alpha, beta) dsigma^2` given
/// `Q = (t-mu)' C^-1 (t-mu)` and `ln|C|`.
pub fn t_evidence(n: usize, q: f64, logdet: f64, alpha: f64, beta: f64) -> f64 {
    let h = n as f64 / 2.0;
    ln_gamma_fn(alpha + h) - ln_gamma_fn(alpha) + alpha * beta.ln()
        - h * LN_2PI
        - 0.5 * logdet
        - (alpha + h) * (beta + q / 2.0).ln()
}

/// `ln [B(a_pi + |gamma|, b_pi + J - |gamma|) / B(a_pi, b_pi)]`.
pub fn log_beta_bernoulli(gamma: &[bool], alpha_pi: f64, beta_pi: f64) -> f64 {
    let on = gamma.iter().filter(|&&g| g).count() as f64;
    let off = gamma.len() as f64 - on;
    ln_beta(alpha_pi + on, beta_pi + off) - ln_beta(alpha_pi, beta_pi)
}

/// `ln p(gamma | mu_y, sigma_w2)` with `pi`, `sigma_eps2`, `mu_w` and `w*`
/// integrated out. Normalised: the values over all `2^J` configurations
/// sum to the log marginal density of the target.
pub fn log_collapsed_gamma(gamma: &[bool], ctx: &CollapsedContext) -> Result<f64> {
    assert!(!ctx.is_flat(), "latent context expected");
    log_collapsed(gamma, ctx)
}

/// Flat-mode counterpart of [`log_collapsed_gamma`], target `y - Zb`.
pub fn log_collapsed_gamma_flat(gamma: &[bool], ctx: &CollapsedContext) -> Result<f64> {
    assert!(ctx.is_flat(), "flat context expected");
    log_collapsed(gamma, ctx)
}

fn log_collapsed(gamma: &[bool], ctx: &CollapsedContext) -> Result<f64> {
    assert_eq!(gamma.len(), ctx.n_vars());
    Ok(log_beta_bernoulli(gamma, ctx.alpha_pi, ctx.beta_pi) + ctx.log_evidence(gamma)?)
}

/// Log acceptance probability of moving `from -> to` when the block is
/// proposed from independent `Bern(pi)` draws. The target is
/// `prod_j Bern(gamma_j | pi) * evidence(gamma)`, so the Bernoulli factors of
/// target and proposal cancel and only the evidence ratio remains.
pub fn log_acceptance(ln_ev_from: f64, ln_ev_to: f64) -> f64 {
    (ln_ev_to - ln_ev_from).min(0.0)
}

/// One block Metropolis-Hastings step on `gamma[block]`. `ln_ev` must hold
/// the log evidence of the current `gamma` and is updated on acceptance.
pub fn mh_block_update<R: Rng + ?Sized>(
    gamma: &mut [bool],
    ln_ev: &mut f64,
    block: &[usize],
    pi: f64,
    ctx: &CollapsedContext,
    rng: &mut R,
) -> Result<bool> {
    debug_assert!(!block.is_empty());
    let old: Vec<bool> = block.iter().map(|&j| gamma[j]).collect();
    let mut changed = false;
    for &j in block {
        let g = rng.random_bool(pi);
        changed |= g != gamma[j];
        gamma[j] = g;
    }
    // Uniform drawn unconditionally so the stream does not depend on the outcome.
    let u: f64 = rng.random();
    if !changed {
        return Ok(true);
    }
    let proposed = ctx.log_evidence(gamma)?;
    if u.ln() < log_acceptance(*ln_ev, proposed) {
        *ln_ev = proposed;
        Ok(true)
    } else {
        for (&j, &g) in block.iter().zip(&old) {
            gamma[j] = g;
        }
        Ok(false)
    }
}

/// Fresh random permutation of `0..j` cut into consecutive blocks.
pub fn random_blocks<R: Rng + ?Sized>(j: usize, block_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..j).collect();
    order.shuffle(rng);
    order.chunks(block_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs every block once; returns the number of accepted proposals.
pub fn mh_sweep<R: Rng + ?Sized>(
    gamma: &mut [bool],
    pi: f64,
    block_size: usize,
    ctx: &CollapsedContext,
    rng: &mut R,
) -> Result<usize> {
    let mut ln_ev = ctx.log_evidence(gamma)?;
    let mut accepted = 0;
    for block in random_blocks(gamma.len(), block_size, rng) {
        accepted += mh_block_update(gamma, &mut ln_ev, &block, pi, ctx, rng)? as usize;
    }
    Ok(accepted)
}

/// `ln int int N(y | X w, s^2 I) N(w | 0, sigma_w2 s^2 I) IG(s^2 | alpha, beta)`.
pub fn linear_model_log_evidence(
    y: &[f64],
    x_sub: &DMatrix<f64>,
    sigma_w2: f64,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let n = y.len();
    let k = x_sub.ncols();
    let yv = DVector::from_column_slice(y);
    let yy = yv.dot(&yv);
    if k == 0 {
        return Ok(t_evidence(n, yy, 0.0, alpha, beta));
    }
    let mut lambda = x_sub.transpose() * x_sub;
    for i in 0..k {
        lambda[(i, i)] += 1.0 / sigma_w2;
    }
    let xty = x_sub.transpose() * &yv;
    let chol = cholesky(lambda, "linear-model evidence")?;
    let q = (yy - xty.dot(&chol.solve(&xty))).max(0.0);
    let logdet = k as f64 * sigma_w2.ln() + ln_det(&chol);
    Ok(t_evidence(n, q, logdet, alpha, beta))
}

/// Posterior probability that `x_ir` belongs to the model, averaging over
/// the four subsets of `{x_r, x_ir}` with equal prior weight.
pub fn irrelevant_inclusion_prob(
    y: &[f64],
    x_r: &[f64],
    x_ir: &[f64],
    sigma_w2: f64,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let n = y.len();
    let col = |v: &[f64]| DMatrix::from_column_slice(n, 1, v);
    let both = DMatrix::from_fn(n, 2, |i, c| if c == 0 { x_ir[i] } else { x_r[i] });
    let e1 = linear_model_log_evidence(y, &DMatrix::zeros(n, 0), sigma_w2, alpha, beta)?;
    let e2 = linear_model_log_evidence(y, &col(x_ir), sigma_w2, alpha, beta)?;
    let e3 = linear_model_log_evidence(y, &col(x_r), sigma_w2, alpha, beta)?;
    let e4 = linear_model_log_evidence(y, &both, sigma_w2, alpha, beta)?;
    Ok((log_sum_exp(&[e2, e4]) - log_sum_exp(&[e1, e2, e3, e4])).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use esabre_testkit::collapsed::{self, Explicit, Priors};
    use esabre_testkit::de;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn moderate_hyper() -> Hyperparameters {
        Hyperparameters {
            alpha_eps: 3.0,
            beta_eps: 2.0,
            sigma_w0_2: 2.0,
            mu_w0: 0.5,
            mu0: 0.3,
            sigma0_2: 1.0,
            ..Hyperparameters::defaults(0)
        }
    }

    fn priors(h: &Hyperparameters, sigma_w2: f64) -> Priors {
        Priors {
            alpha: h.alpha_eps,
            beta: h.beta_eps,
            mu0: h.mu0,
            sigma0_2: h.sigma0_2,
            mu_w0: h.mu_w0,
            sigma_w0_2: h.sigma_w0_2,
            sigma_w2,
        }
    }

    fn design(rows: &[&[f64]]) -> PairDesign {
        let j = rows[0].len();
        PairDesign::new(DMatrix::from_fn(rows.len(), j + 1, |p, c| {
            if c == 0 {
                1.0
            } else {
                rows[p][c - 1]
            }
        }))
        .unwrap()
    }

    fn selected_rows(d: &PairDesign, rows: &[usize], gamma: &[bool]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&p| gamma.iter().enumerate().filter(|(_, &g)| g).map(|(j, _)| d.var(p, j)).collect())
            .collect()
    }

    fn all_gammas(j: usize) -> Vec<Vec<bool>> {
        (0..1usize << j).map(|m| (0..j).map(|b| m >> b & 1 == 1).collect()).collect()
    }

    #[test]
    fn latent_evidence_matches_quadrature_j1_p2() {
        let h = moderate_hyper();
        let d = design(&[&[1.0], &[0.0]]);
        let g = Gram::latent(&d);
        let t = [1.3, 0.2];
        let ctx = CollapsedContext::latent(&d, &g, &h, &t, 1.5);
        let gamma = [true];
        let quad = Explicit {
            t: &t,
            rows: selected_rows(&d, &[0, 1], &gamma),
            priors: priors(&h, 1.5),
            tol: 1e-6,
            gamma_integral: false,
        };
        let want = quad.log_evidence() + collapsed::log_beta_bernoulli(1, 0, h.alpha_pi, h.beta_pi);
        let got = log_collapsed_gamma(&gamma, &ctx).unwrap();
        assert!((got - want).exp_m1().abs() < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn flat_evidence_matches_quadrature_j1_n3() {
        let h = moderate_hyper();
        let d = design(&[&[0.0], &[1.0]]);
        let rows = [0usize, 0, 1];
        let counts = [2usize, 1];
        let mut g = DMatrix::zeros(2, 2);
        for (p, &c) in counts.iter().enumerate() {
            let r = d.x.row(p).transpose();
            g.ger(c as f64, &r, &r, 1.0);
        }
        let g = Gram(g);
        let t = [0.4, 0.9, 2.1];
        let gamma = [true];
        let quad = Explicit {
            t: &t,
            rows: selected_rows(&d, &rows, &gamma),
            priors: priors(&h, 0.8),
            tol: 1e-7,
            gamma_integral: true,
        };
        let want = quad.log_evidence() + collapsed::log_beta_bernoulli(1, 0, h.alpha_pi, h.beta_pi);
        for path in [EvidencePath::Dense, EvidencePath::Woodbury] {
            let ctx = CollapsedContext::flat(&d, &rows, &g, &h, &t, 0.8, path);
            let got = log_collapsed_gamma_flat(&gamma, &ctx).unwrap();
            assert!((got - want).exp_m1().abs() < 1e-4, "{path:?}: {got} vs {want}");
        }
    }

    #[test]
    fn beta_bernoulli_matches_quadrature_and_recurrence() {
        let (a, b) = (1.0, 4.0);
        let gamma = [true, false, true, false, false];
        let got = log_beta_bernoulli(&gamma, a, b);
        let want = collapsed::log_beta_bernoulli(2, 3, a, b);
        assert!((got - want).abs() < 1e-9);
        for j in 0..gamma.len() {
            let mut rest = gamma.to_vec();
            rest[j] = false;
            let n1 = rest.iter().filter(|&&g| g).count() as f64;
            let n0 = gamma.len() as f64 - 1.0 - n1;
            let mut on = rest.clone();
            on[j] = true;
            let diff = log_beta_bernoulli(&on, a, b) - log_beta_bernoulli(&rest, a, b);
            assert!((diff - ((a + n1) / (b + n0)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn excluded_column_leaves_evidence_unchanged() {
        let h = moderate_hyper();
        let d2 = design(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let d3 = design(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0], &[1.0, 1.0, 0.0]]);
        let (g2, g3) = (Gram::latent(&d2), Gram::latent(&d3));
        let t = [1.0, -0.5, 2.0];
        let c2 = CollapsedContext::latent(&d2, &g2, &h, &t, 2.0);
        let c3 = CollapsedContext::latent(&d3, &g3, &h, &t, 2.0);
        for gamma in all_gammas(2) {
            let mut ext = gamma.clone();
            ext.push(false);
            let a = c2.log_evidence(&gamma).unwrap();
            let b = c3.log_evidence(&ext).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_with_identity_incidence_equals_latent() {
        let h = moderate_hyper();
        let d = design(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]]);
        let g = Gram::latent(&d);
        let t = [1.0, -0.5, 2.0, 0.1];
        let rows = [0usize, 1, 2, 3];
        let latent = CollapsedContext::latent(&d, &g, &h, &t, 2.0);
        for path in [EvidencePath::Dense, EvidencePath::Woodbury] {
            let flat = CollapsedContext::flat(&d, &rows, &g, &h, &t, 2.0, path);
            for gamma in all_gammas(2) {
                let a = log_collapsed_gamma(&gamma, &latent).unwrap();
                let b = log_collapsed_gamma_flat(&gamma, &flat).unwrap();
                assert!((a - b).abs() < 1e-10, "{path:?} {gamma:?}");
            }
        }
    }

    #[test]
    fn collapsed_posterior_is_normalised_over_gamma() {
        // Summing exp over all configurations gives the target's marginal,
        // which must not depend on the (irrelevant) design.
        let h = moderate_hyper();
        let t = [0.7, 1.9, -0.3];
        let total = |rows: &[&[f64]]| {
            let d = design(rows);
            let g = Gram::latent(&d);
            let ctx = CollapsedContext::latent(&d, &g, &h, &t, 1.0);
            let v: Vec<f64> = all_gammas(2).iter().map(|gm| log_collapsed_gamma(gm, &ctx).unwrap()).collect();
            log_sum_exp(&v)
        };
        let base = design(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let bg = Gram::latent(&base);
        let zero = CollapsedContext::latent(&base, &bg, &h, &t, 1.0).log_evidence(&[false, false]).unwrap();
        let a = total(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        assert!((a - zero).abs() < 1e-12);
        let b = total(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(b.is_finite() && (b - zero).abs() > 1e-6);
    }

    #[test]
    fn posterior_sigma_matches_evidence_shape() {
        let h = moderate_hyper();
        let d = design(&[&[1.0], &[0.0], &[1.0]]);
        let g = Gram::latent(&d);
        let t = [1.0, 0.2, 1.4];
        let ctx = CollapsedContext::latent(&d, &g, &h, &t, 1.0);
        let post = ctx.posterior(&[true]).unwrap();
        let (q, _) = ctx.quad_logdet_woodbury(&[0]).unwrap();
        assert!((post.scale - (h.beta_eps + q / 2.0)).abs() < 1e-12);
        let ev = ctx.log_evidence(&[true]).unwrap();
        assert!((post.shape - (h.alpha_eps + 1.5)).abs() < 1e-15);
        let dense = ctx.log_evidence_with(&[true], EvidencePath::Dense).unwrap();
        assert!((dense - ev).abs() < 1e-10);
    }

    #[test]
    fn identity_proposal_is_always_accepted() {
        let h = moderate_hyper();
        let d = design(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let g = Gram::latent(&d);
        let ctx = CollapsedContext::latent(&d, &g, &h, &[1.0, -0.5, 2.0], 2.0);
        assert_eq!(log_acceptance(-3.0, -3.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // pi = 1 always proposes "all on".
        let mut gamma = vec![true, true];
        let mut ln_ev = ctx.log_evidence(&gamma).unwrap();
        for _ in 0..50 {
            assert!(mh_block_update(&mut gamma, &mut ln_ev, &[0, 1], 1.0, &ctx, &mut rng).unwrap());
        }
        assert_eq!(gamma, vec![true, true]);
    }

    #[test]
    fn detailed_balance_holds_for_block_moves() {
        let h = moderate_hyper();
        let d = design(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0], &[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let g = Gram::latent(&d);
        let ctx = CollapsedContext::latent(&d, &g, &h, &[1.0, -0.5, 2.0, 0.3], 2.0);
        let pi: f64 = 0.3;
        let bern = |gm: &[bool], js: &[usize]| -> f64 {
            js.iter().map(|&j| if gm[j] { pi.ln() } else { (1.0 - pi).ln() }).sum()
        };
        let target = |gm: &[bool]| bern(gm, &[0, 1, 2]) + ctx.log_evidence(gm).unwrap();
        let block = [0usize, 2];
        for a in all_gammas(3) {
            for b in all_gammas(3) {
                if a[1] != b[1] {
                    continue;
                }
                let fwd = log_acceptance(ctx.log_evidence(&a).unwrap(), ctx.log_evidence(&b).unwrap())
                    + bern(&b, &block)
                    + target(&a);
                let bwd = log_acceptance(ctx.log_evidence(&b).unwrap(), ctx.log_evidence(&a).unwrap())
                    + bern(&a, &block)
                    + target(&b);
                assert!((fwd.exp() - bwd.exp()).abs() <= 1e-10 * fwd.exp().max(bwd.exp()));
            }
        }
    }

    #[test]
    fn gamma_chain_matches_enumeration() {
        let h = Hyperparameters { alpha_pi: 1.0, beta_pi: 1.5, ..moderate_hyper() };
        let d = design(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0], &[1.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]);
        let g = Gram::latent(&d);
        let ctx = CollapsedContext::latent(&d, &g, &h, &[1.8, -0.2, 1.1, 0.0], 1.0);
        let configs = all_gammas(3);
        let lp: Vec<f64> = configs.iter().map(|gm| log_collapsed_gamma(gm, &ctx).unwrap()).collect();
        let norm = log_sum_exp(&lp);
        let exact: Vec<f64> = lp.iter().map(|v| (v - norm).exp()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gamma = vec![false; 3];
        let mut ln_ev = ctx.log_evidence(&gamma).unwrap();
        let mut pi = 0.5;
        let mut counts = [0usize; 8];
        let mut updates = 0;
        while updates < 1_000_000 {
            for block in random_blocks(3, 2, &mut rng) {
                mh_block_update(&mut gamma, &mut ln_ev, &block, pi, &ctx, &mut rng).unwrap();
                updates += 1;
            }
            let on = gamma.iter().filter(|&&x| x).count() as f64;
            pi = crate::dist::BetaDist::new(h.alpha_pi + on, h.beta_pi + 3.0 - on).sample(&mut rng);
            let m: usize = gamma.iter().enumerate().map(|(b, &x)| (x as usize) << b).sum();
            counts[m] += 1;
        }
        let total: usize = counts.iter().sum();
        let tv: f64 = 0.5
            * counts
                .iter()
                .zip(&exact)
                .map(|(&c, &p)| (c as f64 / total as f64 - p).abs())
                .sum::<f64>();
        assert!(tv < 0.01, "tv = {tv}, exact = {exact:?}, counts = {counts:?}");
    }

    #[test]
    fn blocks_partition_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blocks = random_blocks(12, 5, &mut rng);
        assert_eq!(blocks.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5, 2]);
        let mut all: Vec<usize> = blocks.concat();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn flat_woodbury_cost_grows_with_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = moderate_hyper();
        let p = 20;
        let j = 8;
        let d = PairDesign::new(DMatrix::from_fn(p, j + 1, |_, c| {
            if c == 0 || rng.random_bool(0.5) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let gamma: Vec<bool> = (0..j).map(|i| i % 2 == 0).collect();
        let time = |n: usize, rng: &mut ChaCha8Rng| {
            let rows: Vec<usize> = (0..n).map(|i| i % p).collect();
            let t: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let mut best = f64::INFINITY;
            for _ in 0..30 {
                let start = std::time::Instant::now();
                let g = {
                    let mut g = DMatrix::zeros(j + 1, j + 1);
                    for &r in &rows {
                        let x = d.x.row(r).transpose();
                        g.ger(1.0, &x, &x, 1.0);
                    }
                    Gram(g)
                };
                let ctx = CollapsedContext::flat(&d, &rows, &g, &h, &t, 1.0, EvidencePath::Woodbury);
                std::hint::black_box(ctx.log_evidence(&gamma).unwrap());
                best = best.min(start.elapsed().as_secs_f64());
            }
            best
        };
        let t1 = time(1000, &mut rng);
        let t2 = time(2000, &mut rng);
        let t4 = time(4000, &mut rng);
        assert!(t1 < t2 && t2 < t4, "{t1} {t2} {t4}");
    }

    fn t_density_zero_columns(y: &[f64], alpha: f64, beta: f64) -> f64 {
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let n = y.len() as f64;
        let f = |s2: f64| {
            (-0.5 * n * (2.0 * std::f64::consts::PI * s2).ln() - yy / (2.0 * s2)
                + alpha * beta.ln()
                - collapsed::ln_gamma(alpha)
                - (alpha + 1.0) * s2.ln()
                - beta / s2)
                .exp()
        };
        de::positive(f, beta / alpha, 1e-10).ln()
    }

    #[test]
    fn linear_model_zero_columns_matches_quadrature() {
        let y = [0.3, -1.2, 0.8, 2.0];
        let got = linear_model_log_evidence(&y, &DMatrix::zeros(4, 0), 1.0, 2.0, 1.5).unwrap();
        let want = t_density_zero_columns(&y, 2.0, 1.5);
        assert!((got - want).abs() < 1e-6, "{got} {want}");
    }

    #[test]
    fn zero_response_prefers_fewer_columns() {
        let y = [0.0; 5];
        let x1 = DMatrix::from_column_slice(5, 1, &[1.0, 0.0, 1.0, 1.0, 0.0]);
        let x1b = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 1.0, 0.0, 0.0]);
        let x2 = DMatrix::from_fn(5, 2, |i, c| if c == 0 { x1[i] } else { x1b[i] });
        let e0 = linear_model_log_evidence(&y, &DMatrix::zeros(5, 0), 1.0, 1.0, 1.0).unwrap();
        let e1 = linear_model_log_evidence(&y, &x1, 1.0, 1.0, 1.0).unwrap();
        let e1b = linear_model_log_evidence(&y, &x1b, 1.0, 1.0, 1.0).unwrap();
        let e2 = linear_model_log_evidence(&y, &x2, 1.0, 1.0, 1.0).unwrap();
        assert!(e0 > e1 && e0 > e1b);
        assert!(e1 > e2 && e1b > e2);
    }

    #[test]
    fn duplicated_column_is_finite_and_continuous() {
        let y = [0.5, 1.0, -0.2, 0.9];
        let c = [1.0, 0.0, 1.0, 1.0];
        let dup = DMatrix::from_fn(4, 2, |i, _| c[i]);
        let near = DMatrix::from_fn(4, 2, |i, k| c[i] + if k == 1 && i == 0 { 1e-7 } else { 0.0 });
        let a = linear_model_log_evidence(&y, &dup, 1.0, 1.0, 1.0).unwrap();
        let b = linear_model_log_evidence(&y, &near, 1.0, 1.0, 1.0).unwrap();
        assert!(a.is_finite());
        assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn identical_candidate_columns_are_exchangeable() {
        // Identical columns make the two single-column models coincide, so
        // P(x_ir) equals P(x_r) rather than any fixed value.
        let y = [0.5, 1.0, -0.2, 0.9, 1.3, 0.1];
        let x = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let p = irrelevant_inclusion_prob(&y, &x, &x, 1.0, 1.0, 1.0).unwrap();
        let q = irrelevant_inclusion_prob(&y, &x, &x, 1.0, 1.0, 1.0).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(p, q);
        let n = y.len();
        let e = |m: &DMatrix<f64>| linear_model_log_evidence(&y, m, 1.0, 1.0, 1.0).unwrap();
        let e1 = e(&DMatrix::zeros(n, 0));
        let e2 = e(&DMatrix::from_column_slice(n, 1, &x));
        let e4 = e(&DMatrix::from_fn(n, 2, |i, _| x[i]));
        let want = (log_sum_exp(&[e2, e4]) - log_sum_exp(&[e1, e2, e2, e4])).exp();
        assert!((p - want).abs() < 1e-12);
        // Swapping roles leaves the value unchanged as well.
        let z = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let a = irrelevant_inclusion_prob(&y, &x, &z, 1.0, 1.0, 1.0).unwrap();
        let b = irrelevant_inclusion_prob(&y, &z, &x, 1.0, 1.0, 1.0).unwrap();
        let pz = (log_sum_exp(&[e(&DMatrix::from_column_slice(n, 1, &z)), e4]) - e1).exp();
        assert!(a.is_finite() && b.is_finite() && pz.is_finite());
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<f64>, Vec<usize>, Vec<bool>, f64)> {
        (1usize..=50, 1usize..=6).prop_flat_map(|(p, j)| {
            (
                prop::collection::vec(prop::collection::vec(any::<bool>(), j), p),
                prop::collection::vec(-3.0f64..3.0, p),
                prop::collection::vec(1usize..=3, p),
                prop::collection::vec(any::<bool>(), j),
                0.1f64..10.0,
            )
        })
    }

    fn build(x: &[Vec<bool>]) -> PairDesign {
        let j = x[0].len();
        PairDesign::new(DMatrix::from_fn(x.len(), j + 1, |p, c| {
            if c == 0 || x[p][c - 1] {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn woodbury_agrees_with_dense((x, t, reps, gamma, sw) in instance()) {
            let h = moderate_hyper();
            let d = build(&x);
            let g = Gram::latent(&d);
            let latent = CollapsedContext::latent(&d, &g, &h, &t, sw);
            let a = latent.log_evidence_with(&gamma, EvidencePath::Woodbury).unwrap();
            let b = latent.log_evidence_with(&gamma, EvidencePath::Dense).unwrap();
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{} {}", a, b);

            let rows: Vec<usize> = reps.iter().enumerate().flat_map(|(p, &r)| std::iter::repeat_n(p, r)).collect();
            let target: Vec<f64> = rows.iter().enumerate().map(|(i, &p)| t[p] + 0.1 * i as f64).collect();
            let mut gm = DMatrix::zeros(d.x.ncols(), d.x.ncols());
            for &p in &rows {
                let r = d.x.row(p).transpose();
                gm.ger(1.0, &r, &r, 1.0);
            }
            let fg = Gram(gm);
            let flat = CollapsedContext::flat(&d, &rows, &fg, &h, &target, sw, EvidencePath::Dense);
            let a = flat.log_evidence_with(&gamma, EvidencePath::Woodbury).unwrap();
            let b = flat.log_evidence_with(&gamma, EvidencePath::Dense).unwrap();
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{} {}", a, b);
        }

        #[test]
        fn evidence_is_permutation_invariant((x, t, reps, gamma, sw) in instance(), seed in any::<u64>()) {
            let h = moderate_hyper();
            let mut order: Vec<usize> = (0..x.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let d = build(&x);
            let xp: Vec<Vec<bool>> = order.iter().map(|&p| x[p].clone()).collect();
            let tp: Vec<f64> = order.iter().map(|&p| t[p]).collect();
            let dp = build(&xp);
            let (g, gp) = (Gram::latent(&d), Gram::latent(&dp));
            let a = log_collapsed_gamma(&gamma, &CollapsedContext::latent(&d, &g, &h, &t, sw)).unwrap();
            let b = log_collapsed_gamma(&gamma, &CollapsedContext::latent(&dp, &gp, &h, &tp, sw)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));

            // Flat: shuffle observations.
            let rows: Vec<usize> = reps.iter().enumerate().flat_map(|(p, &r)| std::iter::repeat_n(p, r)).collect();
            let target: Vec<f64> = rows.iter().enumerate().map(|(i, &p)| t[p] - 0.05 * i as f64).collect();
            let mut obs: Vec<usize> = (0..rows.len()).collect();
            obs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let rows2: Vec<usize> = obs.iter().map(|&i| rows[i]).collect();
            let target2: Vec<f64> = obs.iter().map(|&i| target[i]).collect();
            let mut gm = DMatrix::zeros(d.x.ncols(), d.x.ncols());
            for &p in &rows {
                let r = d.x.row(p).transpose();
                gm.ger(1.0, &r, &r, 1.0);
            }
            let fg = Gram(gm);
            for path in [EvidencePath::Dense, EvidencePath::Woodbury] {
                let a = log_collapsed_gamma_flat(&gamma, &CollapsedContext::flat(&d, &rows, &fg, &h, &target, sw, path)).unwrap();
                let b = log_collapsed_gamma_flat(&gamma, &CollapsedContext::flat(&d, &rows2, &fg, &h, &target2, sw, path)).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
