#![allow(dead_code)]

use esabre::evidence::{CollapsedContext, EvidencePath, Gram};
use esabre::model::log_joint;
use esabre::sampler::conditionals::*;
use esabre::{Dataset, Hyperparameters, Mode, ModelState, ObservationTable, PairDesign, RandomEffectsLayout};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    esabre::dist::std_normal(rng)
}

/// Small random dataset: `p` pairs, `j` features, `k` factors with 1-3
/// groups each, 1-3 replicates per pair; every group used.
pub fn random_dataset<R: Rng + ?Sized>(rng: &mut R, p: usize, j: usize, k: usize) -> Dataset {
    let x = DMatrix::from_fn(p, j + 1, |_, c| if c == 0 || rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let design = PairDesign::new(x).unwrap();
    let mut pair_id = Vec::new();
    for q in 0..p {
        for _ in 0..rng.random_range(1..=3) {
            pair_id.push(q);
        }
    }
    let n = pair_id.len();
    let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..=3usize.min(n))).collect();
    let groups: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&g| {
            let mut col: Vec<usize> = (0..n).map(|i| if i < g { i } else { rng.random_range(0..g) }).collect();
            col.rotate_left(rng.random_range(0..n));
            col
        })
        .collect();
    let names: Vec<String> = (0..k).map(|i| format!("f{i}")).collect();
    let obs = ObservationTable {
        obs_id: (0..n as i64).collect(),
        y: (0..n).map(|_| 1.0 + normal(rng)).collect(),
        pair_id,
        groups,
        factor_names: names.clone(),
    };
    let layout = RandomEffectsLayout::new(names, sizes).unwrap();
    Dataset::new(obs, design, layout, None).unwrap()
}

pub fn random_hyper<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Hyperparameters {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    Hyperparameters {
        alpha_y: u(0.5, 3.0),
        beta_y: u(0.5, 3.0),
        alpha_eps: u(0.5, 3.0),
        beta_eps: u(0.5, 3.0),
        alpha_w: u(0.5, 3.0),
        beta_w: u(0.5, 3.0),
        mu0: u(-1.0, 1.0),
        sigma0_2: u(0.5, 3.0),
        mu_w0: u(-1.0, 2.0),
        sigma_w0_2: u(0.5, 5.0),
        alpha_pi: u(0.5, 3.0),
        beta_pi: u(0.5, 5.0),
        alpha_b: (0..k).map(|_| u(0.5, 3.0)).collect(),
        beta_b: (0..k).map(|_| u(0.5, 3.0)).collect(),
    }
}

fn pos<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.2..3.0)
}

pub fn random_state<R: Rng + ?Sized>(rng: &mut R, data: &Dataset, mode: Mode) -> ModelState {
    let gamma: Vec<bool> = (0..data.n_vars()).map(|_| rng.random_bool(0.5)).collect();
    let w = gamma.iter().map(|&g| if g { normal(rng) } else { 0.0 }).collect();
    let mut s = ModelState {
        mu_y: (0..data.n_pairs()).map(|_| 1.0 + normal(rng)).collect(),
        w0: normal(rng),
        w,
        gamma,
        mu_w: normal(rng),
        sigma_y2: pos(rng),
        sigma_eps2: pos(rng),
        sigma_w2: pos(rng),
        b: (0..data.n_coefs()).map(|_| 0.5 * normal(rng)).collect(),
        sigma_b2: (0..data.n_factors()).map(|_| pos(rng)).collect(),
        pi: rng.random_range(0.05..0.95),
    };
    if mode == Mode::SabreFlat {
        s.mu_y = s.linear_predictors(data);
        s.sigma_y2 = s.sigma_eps2;
    }
    s
}

fn gauss_block(s: &ModelState) -> DVector<f64> {
    let inc = s.included();
    DVector::from_iterator(inc.len() + 1, std::iter::once(s.w0).chain(inc.iter().map(|&j| s.w[j])))
}

/// `ln N(x | theta.mean, sigma2 * theta.cov)` for the collapsed block
/// `theta = (w0 - mu_w0, w_S - mu_w, mu_w)`.
fn collapsed_block_ln_pdf(
    data: &Dataset,
    hyper: &Hyperparameters,
    s: &ModelState,
    mode: Mode,
    at: &ModelState,
) -> f64 {
    let gram = match mode {
        Mode::Esabre => Gram::latent(&data.design),
        Mode::SabreFlat => Gram::flat(data),
    };
    let target = regression_target(s, data, mode);
    let ctx = match mode {
        Mode::Esabre => CollapsedContext::latent(&data.design, &gram, hyper, &target, s.sigma_w2),
        Mode::SabreFlat => CollapsedContext::flat(
            &data.design,
            &data.obs.pair_id,
            &gram,
            hyper,
            &target,
            s.sigma_w2,
            EvidencePath::Woodbury,
        ),
    };
    let post = ctx.posterior(&s.gamma).unwrap();
    let inc = at.included();
    let mut theta = vec![at.w0 - hyper.mu_w0];
    theta.extend(inc.iter().map(|&j| at.w[j] - at.mu_w));
    theta.push(at.mu_w);
    let mut g = post.theta.clone();
    g.scale = at.sigma_eps2;
    esabre::dist::InvGamma::new(post.shape, post.scale).ln_pdf(at.sigma_eps2) + g.ln_pdf(&DVector::from_vec(theta))
}

/// Fresh values for one parameter block of `s`; everything else is copied.
fn perturb<R: Rng + ?Sized>(rng: &mut R, s: &ModelState, block: &str) -> ModelState {
    let mut t = s.clone();
    match block {
        "mu_y" => t.mu_y.iter_mut().for_each(|v| *v = 1.0 + normal(rng)),
        "w_star" => {
            t.w0 = normal(rng);
            for j in t.included() {
                t.w[j] = normal(rng);
            }
        }
        "b" => t.b.iter_mut().for_each(|v| *v = 0.5 * normal(rng)),
        "sigma_y2" => t.sigma_y2 = pos(rng),
        "sigma_w2" => t.sigma_w2 = pos(rng),
        "sigma_b2" => t.sigma_b2.iter_mut().for_each(|v| *v = pos(rng)),
        "sigma_eps2" => t.sigma_eps2 = pos(rng),
        "mu_w" => t.mu_w = normal(rng),
        "pi" => t.pi = rng.random_range(0.05..0.95),
        "collapsed" => {
            t.sigma_eps2 = pos(rng);
            t.mu_w = normal(rng);
            t.w0 = normal(rng);
            for j in t.included() {
                t.w[j] = normal(rng);
            }
        }
        other => panic!("unknown block {other}"),
    }
    t
}

/// Log density of block `block` of `at` under the conditional built from `s`.
fn conditional_ln_pdf(
    data: &Dataset,
    hyper: &Hyperparameters,
    s: &ModelState,
    mode: Mode,
    block: &str,
    at: &ModelState,
) -> f64 {
    match block {
        "mu_y" => mu_y_conditional(s, data).iter().zip(&at.mu_y).map(|(d, &v)| d.ln_pdf(v)).sum(),
        "w_star" => w_star_conditional(s, data, hyper, mode).unwrap().ln_pdf(&gauss_block(at)),
        "b" => b_conditional(s, data, mode).unwrap().ln_pdf(&DVector::from_column_slice(&at.b)),
        "sigma_y2" => sigma_y2_conditional(s, data, hyper).ln_pdf(at.sigma_y2),
        "sigma_w2" => sigma_w2_conditional(s, hyper).ln_pdf(at.sigma_w2),
        "sigma_b2" => sigma_b2_conditional(s, data, hyper)
            .iter()
            .zip(&at.sigma_b2)
            .map(|(d, &v)| d.ln_pdf(v))
            .sum(),
        "sigma_eps2" => sigma_eps2_conditional(s, data, hyper, mode).ln_pdf(at.sigma_eps2),
        "mu_w" => mu_w_conditional(s, hyper).ln_pdf(at.mu_w),
        "pi" => pi_conditional(s, hyper).ln_pdf(at.pi),
        "collapsed" => collapsed_block_ln_pdf(data, hyper, s, mode, at),
        other => panic!("unknown block {other}"),
    }
}

pub fn blocks(data: &Dataset, mode: Mode) -> Vec<&'static str> {
    let mut v = vec!["w_star", "sigma_w2", "sigma_eps2", "mu_w", "pi", "collapsed"];
    if mode == Mode::Esabre {
        v.extend(["mu_y", "sigma_y2"]);
    }
    if data.n_coefs() > 0 {
        v.extend(["b", "sigma_b2"]);
    }
    v
}

/// `|(ln q(s') - ln q(s)) - (ln p(s') - ln p(s))|` for one block. In flat
/// mode the derived fields `mu_y`, `sigma_y2` do not enter the joint.
pub fn ratio_error<R: Rng + ?Sized>(
    rng: &mut R,
    data: &Dataset,
    hyper: &Hyperparameters,
    s: &ModelState,
    mode: Mode,
    block: &str,
) -> f64 {
    let a = perturb(rng, s, block);
    let b = perturb(rng, s, block);
    let dq = conditional_ln_pdf(data, hyper, s, mode, block, &b) - conditional_ln_pdf(data, hyper, s, mode, block, &a);
    let dp = log_joint(data, hyper, &b, mode) - log_joint(data, hyper, &a, mode);
    (dq - dp).abs()
}

/// Largest ratio error over every block and both modes of one random
/// instance, with the block name.
pub fn instance_max_error<R: Rng + ?Sized>(rng: &mut R) -> (f64, String) {
    let p = rng.random_range(1..=5);
    let j = rng.random_range(1..=3);
    let k = rng.random_range(0..=2);
    let data = random_dataset(rng, p, j, k);
    let hyper = random_hyper(rng, k);
    let mut worst = (0.0, String::new());
    for mode in [Mode::Esabre, Mode::SabreFlat] {
        let s = random_state(rng, &data, mode);
        for block in blocks(&data, mode) {
            let e = ratio_error(rng, &data, &hyper, &s, mode, block);
            if !(e <= worst.0) {
                worst = (e, format!("{mode:?}/{block} (P={p}, J={j}, K={k})"));
            }
        }
    }
    worst
}
