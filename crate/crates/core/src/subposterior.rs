//! Divide-and-conquer fitting: pair-level shards, powered-prior correction
//! of shard hyperparameters, and moment-product combination.
//!
//! Running every shard under the full prior and multiplying the shard
//! posteriors counts the prior `K` times. [`prior_correct`] picks nominal
//! hyperparameters whose `K`-th power fits the intended prior as closely as
//! the families allow.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{digamma, mean_var, std_normal, trigamma, BetaDist, InvGamma};
use crate::error::{Error, Result};
use crate::hyper::Hyperparameters;
use crate::sampler::{run_chains, ChainSet, SamplerConfig};
use crate::simulate::replicate_seed;

/// No-data Gibbs sweeps per powered-prior draw.
pub const POWER_SWEEPS: usize = 25;
/// Smallest shape a corrected inverse-gamma or beta nominal may take.
pub const NOMINAL_SHAPE_FLOOR: f64 = 1e-3;
/// Relative slack on the default dispersion check, for Monte Carlo noise.
pub const DISPERSION_SLACK: f64 = 0.99;

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-10;
const MIN_FIT_SAMPLES: usize = 100;

/// What a partition deals out: whole pairs, or single observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionUnit {
    #[default]
    Pairs,
    Observations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub k_shards: usize,
    #[serde(default)]
    pub unit: PartitionUnit,
    /// Shard of each pair (or observation).
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl ShardPlan {
    /// Sorted unit lists, one per shard.
    pub fn shards(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k_shards];
        for (p, &s) in self.assignment.iter().enumerate() {
            out[s].push(p);
        }
        out
    }
}

/// Deals a seeded shuffle of the pairs round-robin into `k` shards. Shard
/// datasets keep the full random-effect layout, so group ids stay global.
pub fn partition(data: &Dataset, k: usize, seed: u64) -> Result<(ShardPlan, Vec<Dataset>)> {
    partition_by(data, k, seed, PartitionUnit::Pairs)
}

/// As [`partition`], dealing `unit`s. Observation shards keep every pair
/// that still has an observation.
pub fn partition_by(data: &Dataset, k: usize, seed: u64, unit: PartitionUnit) -> Result<(ShardPlan, Vec<Dataset>)> {
    let p = match unit {
        PartitionUnit::Pairs => data.n_pairs(),
        PartitionUnit::Observations => data.n_obs(),
    };
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 shards, got {k}")));
    }
    if k > p {
        return Err(Error::Config(format!("{k} shards for {p} units")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut rng);
    let mut assignment = vec![0; p];
    for (i, q) in order.into_iter().enumerate() {
        assignment[q] = i % k;
    }
    let plan = ShardPlan { k_shards: k, unit, assignment, seed };
    let shards = plan
        .shards()
        .iter()
        .map(|units| match unit {
            PartitionUnit::Pairs => data.subset_pairs(units),
            PartitionUnit::Observations => data.subset_obs(units),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, shards))
}

/// Fits every shard in parallel. Shard `i` uses `replicate_seed(seed, i)`.
pub fn fit_shards(shards: &[Dataset], hyper: &Hyperparameters, config: &SamplerConfig) -> Result<Vec<ChainSet>> {
    shards
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let cfg = SamplerConfig { seed: replicate_seed(config.seed, i), ..config.clone() };
            run_chains(d, hyper, &cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Gaussian { mean: f64, var: f64 },
    InverseGamma { shape: f64, scale: f64 },
    Beta { a: f64, b: f64 },
}

impl Family {
    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            Family::Gaussian { mean, var } => mean.is_finite() && var > 0.0 && var.is_finite(),
            Family::InverseGamma { shape, scale } => shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite(),
            Family::Beta { a, b } => a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{name}: invalid parameters {self:?}")))
        }
    }

    /// The normalised `k`-th power of the density.
    pub fn power(&self, k: usize, name: &str) -> Result<Family> {
        let kf = k as f64;
        let improper = |detail: String| Error::ImproperPower { name: name.to_string(), detail };
        match *self {
            Family::Gaussian { mean, var } => Ok(Family::Gaussian { mean, var: var / kf }),
            Family::InverseGamma { shape, scale } => {
                let s = kf * shape + kf - 1.0;
                if s <= 0.0 {
                    return Err(improper(format!("shape {kf}*{shape}+{kf}-1 = {s}")));
                }
                Ok(Family::InverseGamma { shape: s, scale: kf * scale })
            }
            Family::Beta { a, b } => {
                let (pa, pb) = (kf * a - kf + 1.0, kf * b - kf + 1.0);
                if pa <= 0.0 {
                    return Err(improper(format!("a: {kf}*{a}-{kf}+1 = {pa}")));
                }
                if pb <= 0.0 {
                    return Err(improper(format!("b: {kf}*{b}-{kf}+1 = {pb}")));
                }
                Ok(Family::Beta { a: pa, b: pb })
            }
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Family::Gaussian { mean, var } => crate::dist::ln_normal(x, mean, var),
            Family::InverseGamma { shape, scale } => crate::dist::ln_inv_gamma(x, shape, scale),
            Family::Beta { a, b } => crate::dist::ln_beta_pdf(x, a, b),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Family::Gaussian { mean, var } => mean + var.sqrt() * std_normal(rng),
            Family::InverseGamma { shape, scale } => InvGamma::new(shape, scale).sample(rng),
            Family::Beta { a, b } => BetaDist::new(a, b).sample(rng),
        }
    }

    /// Spread used by the dispersion check: the variance for Gaussian and
    /// beta, the variance of `ln x` for inverse gamma (finite for any shape).
    pub fn dispersion(&self) -> f64 {
        match *self {
            Family::Gaussian { var, .. } => var,
            Family::InverseGamma { shape, .. } => trigamma(shape),
            Family::Beta { a, b } => a * b / ((a + b).powi(2) * (a + b + 1.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorComponent {
    pub name: String,
    #[serde(flatten)]
    pub family: Family,
    /// For Gaussian components whose variance is multiplied by another
    /// component's value: `x ~ N(mean, var * parent)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaled_by: Option<String>,
}

/// Sizes of the model's hierarchical children: indicator/slab pairs and
/// random-effect coefficients per factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_vars: usize,
    pub coefs_per_factor: Vec<usize>,
}

impl ModelDims {
    pub fn of(data: &Dataset) -> Self {
        Self { n_vars: data.n_vars(), coefs_per_factor: data.layout.sizes.clone() }
    }
}

/// A set of prior components. With `model` set, the components are the
/// model's hyperparameter-bearing factors (see [`PriorFamilySpec::from_hyper`])
/// and powered sampling runs the whole hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorFamilySpec {
    pub components: Vec<PriorComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelDims>,
}

fn sigma_b2_name(k: usize) -> String {
    format!("sigma_b2[{k}]")
}

impl PriorFamilySpec {
    pub fn independent(components: Vec<(String, Family)>) -> Self {
        Self {
            components: components.into_iter().map(|(name, family)| PriorComponent { name, family, scaled_by: None }).collect(),
            model: None,
        }
    }

    pub fn from_hyper(h: &Hyperparameters, dims: ModelDims) -> Result<Self> {
        let h = h.for_factors(dims.coefs_per_factor.len())?;
        let c = |name: &str, family, scaled_by: Option<&str>| PriorComponent {
            name: name.into(),
            family,
            scaled_by: scaled_by.map(Into::into),
        };
        let mut components = vec![
            c("sigma_y2", Family::InverseGamma { shape: h.alpha_y, scale: h.beta_y }, None),
            c("sigma_eps2", Family::InverseGamma { shape: h.alpha_eps, scale: h.beta_eps }, None),
            c("sigma_w2", Family::InverseGamma { shape: h.alpha_w, scale: h.beta_w }, None),
            c("pi", Family::Beta { a: h.alpha_pi, b: h.beta_pi }, None),
            c("w0", Family::Gaussian { mean: h.mu_w0, var: h.sigma_w0_2 }, Some("sigma_eps2")),
            c("mu_w", Family::Gaussian { mean: h.mu0, var: h.sigma0_2 }, Some("sigma_eps2")),
        ];
        for k in 0..dims.coefs_per_factor.len() {
            components.push(c(
                &sigma_b2_name(k),
                Family::InverseGamma { shape: h.alpha_b[k], scale: h.beta_b[k] },
                None,
            ));
        }
        let spec = Self { components, model: Some(dims) };
        spec.validate()?;
        Ok(spec)
    }

    pub fn get(&self, name: &str) -> Option<&Family> {
        self.components.iter().find(|c| c.name == name).map(|c| &c.family)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.components {
            c.family.validate(&c.name)?;
            if let Some(p) = &c.scaled_by {
                if !matches!(c.family, Family::Gaussian { .. }) {
                    return Err(Error::Config(format!("{}: only Gaussian components can be scaled", c.name)));
                }
                if self.get(p).is_none() {
                    return Err(Error::Config(format!("{}: unknown scale component {p}", c.name)));
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`PriorFamilySpec::from_hyper`].
    pub fn to_hyper(&self) -> Result<Hyperparameters> {
        let ig = |n: &str| match self.get(n) {
            Some(Family::InverseGamma { shape, scale }) => Ok((*shape, *scale)),
            _ => Err(Error::Config(format!("missing inverse-gamma component {n}"))),
        };
        let gauss = |n: &str| match self.get(n) {
            Some(Family::Gaussian { mean, var }) => Ok((*mean, *var)),
            _ => Err(Error::Config(format!("missing Gaussian component {n}"))),
        };
        let (alpha_pi, beta_pi) = match self.get("pi") {
            Some(Family::Beta { a, b }) => (*a, *b),
            _ => return Err(Error::Config("missing beta component pi".into())),
        };
        let k = self.model.as_ref().map_or(0, |m| m.coefs_per_factor.len());
        let b: Vec<(f64, f64)> = (0..k).map(|i| ig(&sigma_b2_name(i))).collect::<Result<_>>()?;
        let ((alpha_y, beta_y), (alpha_eps, beta_eps), (alpha_w, beta_w)) =
            (ig("sigma_y2")?, ig("sigma_eps2")?, ig("sigma_w2")?);
        let ((mu_w0, sigma_w0_2), (mu0, sigma0_2)) = (gauss("w0")?, gauss("mu_w")?);
        Ok(Hyperparameters {
            alpha_y,
            beta_y,
            alpha_eps,
            beta_eps,
            alpha_w,
            beta_w,
            mu0,
            sigma0_2,
            mu_w0,
            sigma_w0_2,
            alpha_pi,
            beta_pi,
            alpha_b: b.iter().map(|v| v.0).collect(),
            beta_b: b.iter().map(|v| v.1).collect(),
        })
    }

    fn map_families(&self, f: impl Fn(&PriorComponent) -> Family) -> Self {
        Self {
            components: self.components.iter().map(|c| PriorComponent { family: f(c), ..c.clone() }).collect(),
            model: self.model.clone(),
        }
    }
}

/// Draws from a powered prior, one column per component.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSamples {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl PowerSamples {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `n` draws from `q(theta) ∝ p(theta | psi)^k`.
///
/// Independent components are drawn from their powered families. For a
/// model spec every prior factor of the shared parameters is raised to `k`
/// and the joint is sampled by independent short no-data Gibbs runs. The
/// spike has no density to power, so a slab factor is powered and then
/// renormalised; the indicator odds are `(pi / (1 - pi))^k`.
pub fn prior_power_sample<R: Rng + ?Sized>(
    spec: &PriorFamilySpec,
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<PowerSamples> {
    if k == 0 {
        return Err(Error::Config("power must be at least 1".into()));
    }
    spec.validate()?;
    let powered: Vec<Family> = spec.components.iter().map(|c| c.family.power(k, &c.name)).collect::<Result<_>>()?;
    let names: Vec<String> = spec.components.iter().map(|c| c.name.clone()).collect();
    match &spec.model {
        None => {
            if let Some(c) = spec.components.iter().find(|c| c.scaled_by.is_some()) {
                return Err(Error::Config(format!("{}: scaled components need a model spec", c.name)));
            }
            let columns = powered.iter().map(|f| (0..n).map(|_| f.sample(rng)).collect()).collect();
            Ok(PowerSamples { names, columns })
        }
        Some(dims) => {
            let h = spec.to_hyper()?;
            let base: u64 = rng.random();
            let draws: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut r = ChaCha8Rng::seed_from_u64(base);
                    r.set_stream(i as u64);
                    powered_model_draw(&h, dims, k as f64, &mut r)
                })
                .collect();
            let mut columns = vec![Vec::with_capacity(n); names.len()];
            for row in draws {
                for (col, v) in columns.iter_mut().zip(row) {
                    col.push(v);
                }
            }
            Ok(PowerSamples { names, columns })
        }
    }
}

/// One draw of the powered model prior, in [`PriorFamilySpec::from_hyper`]
/// component order. Starts from the product of renormalised powered factors
/// (exact when `k = 1`) and runs [`POWER_SWEEPS`] Gibbs sweeps.
fn powered_model_draw(h: &Hyperparameters, dims: &ModelDims, k: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pw_ig = |a: f64, b: f64| InvGamma::new(k * (a + 1.0) - 1.0, k * b);
    let normal = |rng: &mut ChaCha8Rng, m: f64, v: f64| m + v.sqrt() * std_normal(rng);
    let incl_prob = |pi: f64| 1.0 / (1.0 + ((1.0 - pi) / pi).powf(k));
    let j = dims.n_vars;
    let nf = dims.coefs_per_factor.len();

    let mut se2 = pw_ig(h.alpha_eps, h.beta_eps).sample(rng);
    let mut sw2 = pw_ig(h.alpha_w, h.beta_w).sample(rng);
    let mut pi = BetaDist::new(k * (h.alpha_pi - 1.0) + 1.0, k * (h.beta_pi - 1.0) + 1.0).sample(rng);
    let mut w0 = normal(rng, h.mu_w0, h.sigma_w0_2 * se2 / k);
    let mut mu_w = normal(rng, h.mu0, h.sigma0_2 * se2 / k);
    let mut gamma = vec![false; j];
    let mut w = vec![0.0; j];
    for i in 0..j {
        gamma[i] = rng.random::<f64>() < incl_prob(pi);
        if gamma[i] {
            w[i] = normal(rng, mu_w, sw2 * se2 / k);
        }
    }
    let mut sb2: Vec<f64> = (0..nf).map(|f| pw_ig(h.alpha_b[f], h.beta_b[f]).sample(rng)).collect();
    let mut b: Vec<Vec<f64>> =
        (0..nf).map(|f| (0..dims.coefs_per_factor[f]).map(|_| normal(rng, 0.0, sb2[f] / k)).collect()).collect();
    let mut sy2 = pw_ig(h.alpha_y, h.beta_y).sample(rng);

    for _ in 0..POWER_SWEEPS {
        sy2 = pw_ig(h.alpha_y, h.beta_y).sample(rng);
        for f in 0..nf {
            let ss: f64 = b[f].iter().map(|x| x * x).sum();
            let n_f = b[f].len() as f64;
            sb2[f] = InvGamma::new(k * (h.alpha_b[f] + 1.0) - 1.0 + k * n_f / 2.0, k * (h.beta_b[f] + ss / 2.0))
                .sample(rng);
            for x in &mut b[f] {
                *x = normal(rng, 0.0, sb2[f] / k);
            }
        }
        let n1 = gamma.iter().filter(|&&g| g).count() as f64;
        let n0 = j as f64 - n1;
        pi = BetaDist::new(k * (h.alpha_pi - 1.0) + 1.0 + k * n1, k * (h.beta_pi - 1.0) + 1.0 + k * n0).sample(rng);
        let q = incl_prob(pi);
        for i in 0..j {
            gamma[i] = rng.random::<f64>() < q;
            w[i] = if gamma[i] { normal(rng, mu_w, sw2 * se2 / k) } else { 0.0 };
        }
        let (n1, sum_w) =
            gamma.iter().zip(&w).filter(|(g, _)| **g).fold((0.0, 0.0), |(n, s), (_, &x)| (n + 1.0, s + x));
        let prec = 1.0 / h.sigma0_2 + n1 / sw2;
        mu_w = normal(rng, (h.mu0 / h.sigma0_2 + sum_w / sw2) / prec, se2 / (k * prec));
        w0 = normal(rng, h.mu_w0, h.sigma_w0_2 * se2 / k);
        let ssw: f64 = gamma.iter().zip(&w).filter(|(g, _)| **g).map(|(_, &x)| (x - mu_w).powi(2)).sum();
        let shape = k * (h.alpha_eps + 1.0) - 1.0 + k + n1 / 2.0;
        let scale = k
            * (h.beta_eps
                + (w0 - h.mu_w0).powi(2) / (2.0 * h.sigma_w0_2)
                + (mu_w - h.mu0).powi(2) / (2.0 * h.sigma0_2)
                + ssw / (2.0 * sw2));
        se2 = InvGamma::new(shape, scale).sample(rng);
        sw2 = InvGamma::new(k * (h.alpha_w + 1.0) - 1.0 + n1 / 2.0, k * (h.beta_w + ssw / (2.0 * se2))).sample(rng);
    }
    let mut out = vec![sy2, se2, sw2, pi, w0, mu_w];
    out.extend(sb2);
    out
}

fn fit_gaussian(x: &[f64], scale: Option<&[f64]>, name: &str) -> Result<Family> {
    let n = x.len() as f64;
    let (mean, var) = match scale {
        None => {
            let m = x.iter().sum::<f64>() / n;
            (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
        }
        Some(s) => {
            let wsum: f64 = s.iter().map(|v| 1.0 / v).sum();
            let m = x.iter().zip(s).map(|(v, s)| v / s).sum::<f64>() / wsum;
            (m, x.iter().zip(s).map(|(v, s)| (v - m).powi(2) / s).sum::<f64>() / n)
        }
    };
    if !(var > 0.0) || !var.is_finite() || !mean.is_finite() {
        return Err(Error::Degenerate(format!("degenerate sample for {name}")));
    }
    Ok(Family::Gaussian { mean, var })
}

fn newton_failed(name: &str) -> Error {
    Error::Numerical(format!("{name}: Newton iterations did not converge in {NEWTON_MAX_ITER} steps"))
}

/// Gamma ML on `1 / x`: solves `ln a - digamma(a) = ln mean(z) - mean(ln z)`.
fn fit_inverse_gamma(x: &[f64], name: &str) -> Result<Family> {
    let n = x.len() as f64;
    let mz = x.iter().map(|v| 1.0 / v).sum::<f64>() / n;
    let mlz = x.iter().map(|v| -v.ln()).sum::<f64>() / n;
    let s = mz.ln() - mlz;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Degenerate(format!("degenerate sample for {name}")));
    }
    let mut a = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..NEWTON_MAX_ITER {
        let g = a.ln() - digamma(a) - s;
        if g.abs() < NEWTON_TOL {
            return Ok(Family::InverseGamma { shape: a, scale: a / mz });
        }
        let step = g / (1.0 / a - trigamma(a));
        let mut next = a - step;
        if next <= 0.0 {
            next = a / 2.0;
        }
        a = next;
    }
    Err(newton_failed(name))
}

fn fit_beta(x: &[f64], name: &str) -> Result<Family> {
    let n = x.len() as f64;
    let g1 = x.iter().map(|v| v.ln()).sum::<f64>() / n;
    let g2 = x.iter().map(|v| (1.0 - v).ln()).sum::<f64>() / n;
    let (m, v) = mean_var(x);
    if !(v > 0.0) || !g1.is_finite() || !g2.is_finite() {
        return Err(Error::Degenerate(format!("degenerate sample for {name}")));
    }
    let c = (m * (1.0 - m) / v - 1.0).max(1e-3);
    let (mut a, mut b) = (m * c, (1.0 - m) * c);
    for _ in 0..NEWTON_MAX_ITER {
        let dab = digamma(a + b);
        let (f1, f2) = (digamma(a) - dab - g1, digamma(b) - dab - g2);
        if f1.abs().max(f2.abs()) < NEWTON_TOL {
            return Ok(Family::Beta { a, b });
        }
        let tab = trigamma(a + b);
        let (j11, j22, j12) = (trigamma(a) - tab, trigamma(b) - tab, -tab);
        let det = j11 * j22 - j12 * j12;
        let (da, db) = ((j22 * f1 - j12 * f2) / det, (j11 * f2 - j12 * f1) / det);
        let mut t = 1.0;
        while a - t * da <= 0.0 || b - t * db <= 0.0 {
            t /= 2.0;
        }
        a -= t * da;
        b -= t * db;
    }
    Err(newton_failed(name))
}

/// Per-component maximum-likelihood fit of each family in `family` to the
/// draws, which minimises the sample estimate of `KL(q || p(.|psi))` over
/// `psi`. Scaled Gaussian components are fitted to `x / sqrt(parent)`.
pub fn kl_fit_hyper(samples: &PowerSamples, family: &PriorFamilySpec) -> Result<PriorFamilySpec> {
    let mut components = Vec::with_capacity(family.components.len());
    for c in &family.components {
        let x = samples.column(&c.name).ok_or_else(|| Error::InvalidData(format!("no samples for {}", c.name)))?;
        if x.len() < MIN_FIT_SAMPLES {
            return Err(Error::InvalidData(format!(
                "{}: {} samples, at least {MIN_FIT_SAMPLES} needed",
                c.name,
                x.len()
            )));
        }
        let fitted = match c.family {
            Family::Gaussian { .. } => {
                let scale = match &c.scaled_by {
                    Some(p) => Some(samples.column(p).ok_or_else(|| Error::InvalidData(format!("no samples for {p}")))?),
                    None => None,
                };
                fit_gaussian(x, scale, &c.name)?
            }
            Family::InverseGamma { .. } => fit_inverse_gamma(x, &c.name)?,
            Family::Beta { .. } => fit_beta(x, &c.name)?,
        };
        components.push(PriorComponent { family: fitted, ..c.clone() });
    }
    Ok(PriorFamilySpec { components, model: family.model.clone() })
}

/// What the dispersion check sees for one component.
#[derive(Debug, Clone, Copy)]
pub struct ComponentCheck<'a> {
    pub name: &'a str,
    pub target: &'a Family,
    pub fitted: &'a Family,
    pub nominal: &'a Family,
    /// The nominal shape was clamped at [`NOMINAL_SHAPE_FLOOR`]; the family
    /// cannot be made more disperse.
    pub at_floor: bool,
}

/// Default check: the fitted spread reaches the target's, or the nominal is
/// already as disperse as the family allows.
pub fn sufficiently_disperse(c: &ComponentCheck<'_>) -> bool {
    c.at_floor || c.fitted.dispersion() >= DISPERSION_SLACK * c.target.dispersion()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    /// Hyperparameters to run each shard with.
    pub nominal: PriorFamilySpec,
    /// Fit of the intended family to the powered nominal prior.
    pub fitted: PriorFamilySpec,
    pub rounds: usize,
}

fn clamp_floor(v: f64) -> (f64, bool) {
    if v < NOMINAL_SHAPE_FLOOR {
        (NOMINAL_SHAPE_FLOOR, true)
    } else {
        (v, false)
    }
}

/// Nominal whose exact `k`-th power is `powered`. Inverse-gamma shapes are
/// clamped on the nominal, beta shapes on the powered side (the power is
/// improper below `(k - 1) / k`).
fn invert_power(powered: &Family, k: f64) -> (Family, bool) {
    match *powered {
        Family::Gaussian { mean, var } => (Family::Gaussian { mean, var: var * k }, false),
        Family::InverseGamma { shape, scale } => {
            let (s, fl) = clamp_floor((shape + 1.0) / k - 1.0);
            (Family::InverseGamma { shape: s, scale: scale / k }, fl)
        }
        Family::Beta { a, b } => {
            let ((a, fa), (b, fb)) = (clamp_floor(a), clamp_floor(b));
            (Family::Beta { a: (a + k - 1.0) / k, b: (b + k - 1.0) / k }, fa || fb)
        }
    }
}

/// Next nominal for a component that failed the check. The Gaussian step
/// is a fixed-point step on mean and variance. For the shape families the
/// powered concentration shrinks by `fitted / target` dispersion, keeping
/// the target's scale or mean, then maps back through [`invert_power`].
fn update_nominal(nominal: &Family, fitted: &Family, target: &Family, k: f64) -> (Family, bool) {
    let ratio = (fitted.dispersion() / target.dispersion()).min(1.0);
    match (*nominal, *fitted, *target) {
        (Family::Gaussian { mean, var }, Family::Gaussian { mean: fm, var: fv }, Family::Gaussian { mean: tm, var: tv }) => {
            (Family::Gaussian { mean: mean + tm - fm, var: var * tv / fv }, false)
        }
        (Family::InverseGamma { shape, .. }, _, Family::InverseGamma { scale: ts, .. }) => {
            let ps = k * shape + k - 1.0;
            invert_power(&Family::InverseGamma { shape: ps * ratio, scale: ts }, k)
        }
        (Family::Beta { a, b }, _, Family::Beta { a: ta, b: tb }) => {
            let c = (k * a - k + 1.0) + (k * b - k + 1.0);
            let m = ta / (ta + tb);
            invert_power(&Family::Beta { a: m * c * ratio, b: (1.0 - m) * c * ratio }, k)
        }
        _ => unreachable!("families are fixed per component"),
    }
}

/// Searches for nominal hyperparameters whose `k`-th power is close to
/// `target`: start from the exact powered inverse, then sample the powered
/// nominal, fit, and step until `check` accepts every component.
pub fn prior_correct<R, F>(
    target: &PriorFamilySpec,
    k: usize,
    check: F,
    max_rounds: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<Correction>
where
    R: Rng + ?Sized,
    F: Fn(&ComponentCheck<'_>) -> bool,
{
    target.validate()?;
    let kf = k as f64;
    let inv: Vec<(Family, bool)> = target.components.iter().map(|c| invert_power(&c.family, kf)).collect();
    let mut floors: Vec<bool> = inv.iter().map(|v| v.1).collect();
    let mut nominal = target.map_families(|c| {
        let i = target.components.iter().position(|x| x.name == c.name).unwrap();
        inv[i].0
    });
    for round in 1..=max_rounds {
        let samples = prior_power_sample(&nominal, k, n_samples, rng)?;
        let fitted = kl_fit_hyper(&samples, target)?;
        let ok: Vec<bool> = (0..target.components.len())
            .map(|i| {
                check(&ComponentCheck {
                    name: &target.components[i].name,
                    target: &target.components[i].family,
                    fitted: &fitted.components[i].family,
                    nominal: &nominal.components[i].family,
                    at_floor: floors[i],
                })
            })
            .collect();
        if ok.iter().all(|&v| v) {
            return Ok(Correction { nominal, fitted, rounds: round });
        }
        for (i, c) in nominal.components.iter_mut().enumerate() {
            if !ok[i] {
                let (f, fl) = update_nominal(&c.family, &fitted.components[i].family, &target.components[i].family, kf);
                c.family = f;
                floors[i] = fl;
            }
        }
    }
    Err(Error::Numerical(format!("prior correction not accepted after {max_rounds} rounds")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub name: String,
    pub mean: f64,
    pub var: f64,
}

/// Moments of one shard's posterior samples, pooled over its chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub inclusion: Vec<f64>,
    pub scalars: Vec<GaussianSummary>,
}

impl ShardSummary {
    /// Scalars are `w0`, `w[j]`, `mu_w`, the variances, `pi` and `b[c]`.
    /// Inclusion is the smoothed visit frequency `(count + 1/2) / (n + 1)`.
    pub fn from_chain_set(set: &ChainSet) -> Result<Self> {
        let states: Vec<_> = set.states().collect();
        let first = states.first().ok_or_else(|| Error::InvalidData("shard has no samples".into()))?;
        let (j, c, k) = (first.w.len(), first.b.len(), first.sigma_b2.len());
        let mut names = vec!["w0".to_string(), "mu_w".into(), "sigma_y2".into(), "sigma_eps2".into()];
        names.extend(["sigma_w2".into(), "pi".into()]);
        names.extend((0..j).map(|i| format!("w[{i}]")));
        names.extend((0..c).map(|i| format!("b[{i}]")));
        names.extend((0..k).map(sigma_b2_name));
        let mut cols = vec![Vec::with_capacity(states.len()); names.len()];
        for s in &states {
            let row = [s.w0, s.mu_w, s.sigma_y2, s.sigma_eps2, s.sigma_w2, s.pi]
                .into_iter()
                .chain(s.w.iter().copied())
                .chain(s.b.iter().copied())
                .chain(s.sigma_b2.iter().copied());
            for (col, v) in cols.iter_mut().zip(row) {
                col.push(v);
            }
        }
        let scalars = names
            .into_iter()
            .zip(&cols)
            .map(|(name, col)| {
                let (mean, var) = mean_var(col);
                GaussianSummary { name, mean, var }
            })
            .collect();
        // A shard that never (or always) visits a variable still leaves it
        // uncertain; exact 0 or 1 would make the product undefined.
        let n = states.len() as f64;
        let inclusion = (0..j)
            .map(|i| (states.iter().filter(|s| s.gamma[i]).count() as f64 + 0.5) / (n + 1.0))
            .collect();
        Ok(Self { inclusion, scalars })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combined {
    pub n_shards: usize,
    pub inclusion: Vec<f64>,
    pub scalars: Vec<GaussianSummary>,
}

fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

/// `prod p / (prod p + prod (1 - p))`, evaluated in logs.
pub fn combine_inclusion(ps: &[f64], j: usize) -> Result<f64> {
    let lp = sorted_sum(ps.iter().map(|p| p.ln()).collect());
    let lq = sorted_sum(ps.iter().map(|p| (1.0 - p).ln()).collect());
    match (lp == f64::NEG_INFINITY, lq == f64::NEG_INFINITY) {
        (true, true) => Err(Error::Degenerate(format!("variable {j}: one shard gives 0 and another 1"))),
        (true, false) => Ok(0.0),
        (false, true) => Ok(1.0),
        _ => Ok(1.0 / (1.0 + (lq - lp).exp())),
    }
}

/// Products of per-shard Gaussian moments and of per-shard Bernoulli
/// inclusion probabilities. Sums run over sorted terms, so the result does
/// not depend on shard order. Shards with zero variance in a scalar pin it.
pub fn combine_subposteriors(shards: &[ShardSummary]) -> Result<Combined> {
    let first = shards.first().ok_or_else(|| Error::InvalidData("no shards to combine".into()))?;
    for s in shards {
        let same_names = s.scalars.len() == first.scalars.len()
            && s.scalars.iter().zip(&first.scalars).all(|(a, b)| a.name == b.name);
        if s.inclusion.len() != first.inclusion.len() || !same_names {
            return Err(Error::InvalidData("shards disagree on parameter dimensions".into()));
        }
    }
    if shards.len() == 1 {
        return Ok(Combined { n_shards: 1, inclusion: first.inclusion.clone(), scalars: first.scalars.clone() });
    }
    let inclusion = (0..first.inclusion.len())
        .map(|j| combine_inclusion(&shards.iter().map(|s| s.inclusion[j]).collect::<Vec<_>>(), j))
        .collect::<Result<_>>()?;
    let scalars = (0..first.scalars.len())
        .map(|i| {
            let mv: Vec<(f64, f64)> = shards.iter().map(|s| (s.scalars[i].mean, s.scalars[i].var)).collect();
            let pinned: Vec<f64> = mv.iter().filter(|(_, v)| *v == 0.0).map(|(m, _)| *m).collect();
            let (mean, var) = if pinned.is_empty() {
                let prec = sorted_sum(mv.iter().map(|(_, v)| 1.0 / v).collect());
                (sorted_sum(mv.iter().map(|(m, v)| m / v).collect()) / prec, 1.0 / prec)
            } else {
                (sorted_sum(pinned.clone()) / pinned.len() as f64, 0.0)
            };
            GaussianSummary { name: first.scalars[i].name.clone(), mean, var }
        })
        .collect();
    Ok(Combined { n_shards: shards.len(), inclusion, scalars })
}
