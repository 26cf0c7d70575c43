//! One full MCMC iteration.

use rand::Rng;

use super::conditionals::{
    b_conditional, mu_y_conditional, pi_conditional, regression_target, sigma_b2_conditional,
    sigma_w2_conditional, sigma_y2_conditional, w_star_conditional,
};
use crate::data::Dataset;
use crate::dist::{InvGamma, Normal1};
use crate::error::Result;
use crate::evidence::{mh_sweep, CollapsedContext, EvidencePath, Gram};
use crate::hyper::Hyperparameters;
use crate::state::{Mode, ModelState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSettings {
    pub mode: Mode,
    pub block_size: usize,
    pub flat_evidence: EvidencePath,
    /// When false the indicators are held fixed.
    pub update_gamma: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            mode: Mode::Esabre,
            block_size: 5,
            flat_evidence: EvidencePath::Dense,
            update_gamma: true,
        }
    }
}

/// Per-dataset quantities reused across sweeps.
pub struct Workspace {
    gram: Gram,
}

impl Workspace {
    pub fn new(data: &Dataset, mode: Mode) -> Self {
        let gram = match mode {
            Mode::Esabre => Gram::latent(&data.design),
            Mode::SabreFlat => Gram::flat(data),
        };
        Self { gram }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub gamma_accepted: usize,
    pub gamma_blocks: usize,
}

/// Collapsed indicator update only (step 1 of the sweep).
pub fn update_gamma<R: Rng + ?Sized>(
    s: &mut ModelState,
    data: &Dataset,
    hyper: &Hyperparameters,
    settings: &SweepSettings,
    ws: &Workspace,
    rng: &mut R,
) -> Result<usize> {
    let target = regression_target(s, data, settings.mode);
    let ctx = context(data, hyper, settings, ws, &target, s.sigma_w2);
    mh_sweep(&mut s.gamma, s.pi, settings.block_size, &ctx, rng)
}

fn context<'a>(
    data: &'a Dataset,
    hyper: &Hyperparameters,
    settings: &SweepSettings,
    ws: &'a Workspace,
    target: &[f64],
    sigma_w2: f64,
) -> CollapsedContext<'a> {
    match settings.mode {
        Mode::Esabre => CollapsedContext::latent(&data.design, &ws.gram, hyper, target, sigma_w2),
        Mode::SabreFlat => CollapsedContext::flat(
            &data.design,
            &data.obs.pair_id,
            &ws.gram,
            hyper,
            target,
            sigma_w2,
            settings.flat_evidence,
        ),
    }
}

/// Runs one iteration in the fixed order: indicators, `pi`, collapsed
/// `sigma_eps2`, collapsed `mu_w`, `w*`, `mu_y`, `b`, `sigma_y2`,
/// `sigma_b2`, `sigma_w2`.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    s: &mut ModelState,
    data: &Dataset,
    hyper: &Hyperparameters,
    settings: &SweepSettings,
    ws: &Workspace,
    rng: &mut R,
) -> Result<SweepStats> {
    let mode = settings.mode;
    let mut stats = SweepStats::default();
    let target = regression_target(s, data, mode);
    let ctx = context(data, hyper, settings, ws, &target, s.sigma_w2);

    if settings.update_gamma && !s.gamma.is_empty() {
        stats.gamma_blocks = s.gamma.len().div_ceil(settings.block_size.max(1));
        stats.gamma_accepted = mh_sweep(&mut s.gamma, s.pi, settings.block_size, &ctx, rng)?;
    }

    s.pi = pi_conditional(s, hyper).sample(rng);

    let post = ctx.posterior(&s.gamma)?;
    s.sigma_eps2 = InvGamma::new(post.shape, post.scale).sample(rng);
    let (m, f) = post.mu_w_moments();
    s.mu_w = Normal1::new(m, s.sigma_eps2 * f).sample(rng);
    drop(ctx);

    let wd = w_star_conditional(s, data, hyper, mode)?;
    let draw = wd.sample(rng);
    s.w0 = draw[0];
    s.w.iter_mut().for_each(|w| *w = 0.0);
    for (c, j) in s.included().into_iter().enumerate() {
        s.w[j] = draw[c + 1];
    }

    match mode {
        Mode::Esabre => {
            let conds = mu_y_conditional(s, data);
            for (mu, d) in s.mu_y.iter_mut().zip(conds) {
                *mu = d.sample(rng);
            }
        }
        Mode::SabreFlat => s.mu_y = s.linear_predictors(data),
    }

    if data.n_coefs() > 0 {
        let b = b_conditional(s, data, mode)?.sample(rng);
        s.b.copy_from_slice(b.as_slice());
    }

    match mode {
        Mode::Esabre => s.sigma_y2 = sigma_y2_conditional(s, data, hyper).sample(rng),
        Mode::SabreFlat => s.sigma_y2 = s.sigma_eps2,
    }

    for (k, d) in sigma_b2_conditional(s, data, hyper).into_iter().enumerate() {
        s.sigma_b2[k] = d.sample(rng);
    }

    s.sigma_w2 = sigma_w2_conditional(s, hyper).sample(rng);
    Ok(stats)
}
