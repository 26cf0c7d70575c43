//! Synthetic pairwise-assay datasets with known ground truth.
//!
//! `n` strains give `n(n-1)/2 + n` unordered pairs (every pair of distinct
//! strains plus each strain against itself). Pair features are `Bern(0.5)`
//! indicators, all zero for self-pairs.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ObservationTable, PairDesign, RandomEffectsLayout, Truth};
use crate::dist::std_normal;
use crate::error::{Error, Result};

/// How the groups of a random-effect factor are assigned to observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorKind {
    /// Group = reference strain of the observation.
    Reference,
    /// Group = test strain of the observation.
    Test,
    /// Groups drawn uniformly per observation, each used at least once.
    Generic { groups: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FactorKind,
}

/// Distribution of the nonzero fixed-effect coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum WeightDist {
    Uniform { lo: f64, hi: f64 },
    /// `N(mean, sd^2)` truncated to negative values.
    NegativeNormal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_strains: usize,
    pub n_obs: usize,
    pub n_vars: usize,
    pub factors: Vec<FactorSpec>,
    pub re_inclusion_prob: f64,
    pub re_var_range: (f64, f64),
    pub weights: WeightDist,
    pub pi_range: (f64, f64),
    pub w0: f64,
    pub sigma_y2: f64,
    pub sigma_eps2: f64,
    pub seed: u64,
}

fn generic_factor(name: &str, groups: usize) -> FactorSpec {
    FactorSpec { name: name.into(), kind: FactorKind::Generic { groups } }
}

fn strain_factor(name: &str, kind: FactorKind) -> FactorSpec {
    FactorSpec { name: name.into(), kind }
}

/// Number of pairs for `n` strains.
pub fn n_pairs_for(n_strains: usize) -> usize {
    n_strains * (n_strains - 1) / 2 + n_strains
}

/// The strains `(a, b)`, `a <= b`, of every pair; self-pairs come first.
pub fn pair_strains(n_strains: usize) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = (0..n_strains).map(|a| (a, a)).collect();
    for a in 0..n_strains {
        for b in a + 1..n_strains {
            v.push((a, b));
        }
    }
    v
}

impl ScenarioSpec {
    /// Four candidate factors (reference, test and two generic), 10 strains,
    /// 50 features, `sigma_y2 = sigma_eps2 = sigma2`.
    pub fn basic(n_obs: usize, sigma2: f64, seed: u64) -> Self {
        Self {
            n_strains: 10,
            n_obs,
            n_vars: 50,
            factors: vec![
                strain_factor("reference", FactorKind::Reference),
                strain_factor("test", FactorKind::Test),
                generic_factor("date", 10),
                generic_factor("plate", 10),
            ],
            re_inclusion_prob: 0.5,
            re_var_range: (0.2, 0.5),
            weights: WeightDist::Uniform { lo: -0.4, hi: -0.2 },
            pi_range: (0.2, 0.4),
            w0: 10.0,
            sigma_y2: sigma2,
            sigma_eps2: sigma2,
            seed,
        }
    }

    pub fn sd1(n_obs: usize, seed: u64) -> Self {
        Self::basic(n_obs, 0.033, seed)
    }

    pub fn sd2(n_obs: usize, seed: u64) -> Self {
        Self::basic(n_obs, 0.1, seed)
    }

    pub fn sd3(n_obs: usize, seed: u64) -> Self {
        Self::basic(n_obs, 0.3, seed)
    }

    pub fn n_pairs(&self) -> usize {
        n_pairs_for(self.n_strains)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_strains == 0 {
            return bad("n_strains must be positive".into());
        }
        if self.n_obs < self.n_pairs() {
            return bad(format!("n_obs {} is below the pair count {}", self.n_obs, self.n_pairs()));
        }
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
                Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")))
            } else {
                Ok(())
            }
        };
        range("pi", self.pi_range, 0.0, 1.0)?;
        range("re_var", self.re_var_range, 0.0, f64::INFINITY)?;
        match self.weights {
            WeightDist::Uniform { lo, hi } => range("w", (lo, hi), f64::NEG_INFINITY, 0.0)?,
            WeightDist::NegativeNormal { mean, sd } => {
                if !(mean.is_finite() && sd > 0.0) {
                    return bad(format!("negative-normal weights need finite mean and sd > 0, got {mean}, {sd}"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.re_inclusion_prob) {
            return bad(format!("re_inclusion_prob {} is not in [0, 1]", self.re_inclusion_prob));
        }
        if !(self.sigma_y2 >= 0.0 && self.sigma_eps2 >= 0.0) {
            return bad("noise variances must be non-negative".into());
        }
        for f in &self.factors {
            if let FactorKind::Generic { groups } = f.kind {
                if groups == 0 || groups > self.n_obs {
                    return bad(format!("factor {}: {groups} groups for {} observations", f.name, self.n_obs));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }
}

fn draw_weight<R: Rng + ?Sized>(d: WeightDist, rng: &mut R) -> f64 {
    match d {
        WeightDist::Uniform { lo, hi } => {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        }
        WeightDist::NegativeNormal { mean, sd } => loop {
            let w = mean + sd * std_normal(rng);
            if w < 0.0 {
                break w;
            }
        },
    }
}

fn uniform<R: Rng + ?Sized>((lo, hi): (f64, f64), rng: &mut R) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Each of `0..m` once, the remaining `n - m` uniformly; order shuffled.
fn cover_then_uniform<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..m).collect();
    v.extend((m..n).map(|_| rng.random_range(0..m)));
    v.shuffle(rng);
    v
}

/// Draws a dataset with truth from `spec`.
pub fn generate_basic(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.n_pairs();
    let j = spec.n_vars;
    let strains = pair_strains(spec.n_strains);

    let pi = uniform(spec.pi_range, &mut rng);
    let gamma: Vec<u8> = (0..j).map(|_| rng.random_bool(pi) as u8).collect();
    let w: Vec<f64> = gamma
        .iter()
        .map(|&g| if g == 1 { draw_weight(spec.weights, &mut rng) } else { 0.0 })
        .collect();

    let mut x = DMatrix::zeros(p, j + 1);
    for (q, &(a, b)) in strains.iter().enumerate() {
        x[(q, 0)] = 1.0;
        for c in 1..=j {
            // Draw for every pair so self-pairs do not shift the stream.
            let bit = rng.random_bool(0.5);
            if a != b && bit {
                x[(q, c)] = 1.0;
            }
        }
    }
    let design = PairDesign::new(x)?;

    let mut names = Vec::with_capacity(spec.factors.len());
    let mut sizes = Vec::with_capacity(spec.factors.len());
    let mut re_included = BTreeMap::new();
    let mut re_variances = Vec::new();
    let mut b = Vec::new();
    for f in &spec.factors {
        let g = match f.kind {
            FactorKind::Reference | FactorKind::Test => spec.n_strains,
            FactorKind::Generic { groups } => groups,
        };
        let on = rng.random_bool(spec.re_inclusion_prob);
        let var = uniform(spec.re_var_range, &mut rng);
        let coefs: Vec<f64> = (0..g).map(|_| var.sqrt() * std_normal(&mut rng)).collect();
        names.push(f.name.clone());
        sizes.push(g);
        re_included.insert(f.name.clone(), on);
        re_variances.push(if on { var } else { 0.0 });
        b.extend(coefs.into_iter().map(|c| if on { c } else { 0.0 }));
    }
    let layout = RandomEffectsLayout::new(names.clone(), sizes)?;

    let mu_y: Vec<f64> = (0..p)
        .map(|q| {
            let eta = spec.w0 + (0..j).map(|c| design.var(q, c) * w[c]).sum::<f64>();
            eta + spec.sigma_eps2.sqrt() * std_normal(&mut rng)
        })
        .collect();

    let n = spec.n_obs;
    let pair_id = cover_then_uniform(n, p, &mut rng);
    let flip: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let mut groups = Vec::with_capacity(spec.factors.len());
    for f in &spec.factors {
        let col: Vec<usize> = match f.kind {
            FactorKind::Reference | FactorKind::Test => pair_id
                .iter()
                .zip(&flip)
                .map(|(&q, &fl)| {
                    let (a, b) = strains[q];
                    let (r, t) = if fl { (b, a) } else { (a, b) };
                    if f.kind == FactorKind::Reference {
                        r
                    } else {
                        t
                    }
                })
                .collect(),
            FactorKind::Generic { groups } => cover_then_uniform(n, groups, &mut rng),
        };
        groups.push(col);
    }
    let offsets = layout.offsets();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let zb: f64 = groups.iter().enumerate().map(|(k, col)| b[offsets[k] + col[i]]).sum();
            mu_y[pair_id[i]] + zb + spec.sigma_y2.sqrt() * std_normal(&mut rng)
        })
        .collect();

    let obs = ObservationTable {
        obs_id: (0..n as i64).collect(),
        y,
        pair_id,
        groups,
        factor_names: names,
    };
    let truth = Truth {
        gamma,
        re_included,
        w0: Some(spec.w0),
        w: Some(w),
        pi: Some(pi),
        re_variances: Some(re_variances),
        b: Some(b),
        mu_y: Some(mu_y),
    };
    Dataset::new(obs, design, layout, Some(truth))
}

/// Seed of replicate `r` in a suite seeded with `seed`.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng.random()
}

/// Spec of one model-selection dataset: 50 features and four candidate
/// factors, `sigma_y2 = sigma_eps2`.
pub fn selection_spec(n_strains: usize, sigma_eps2: f64, seed: u64) -> ScenarioSpec {
    let p = n_pairs_for(n_strains);
    ScenarioSpec {
        n_strains,
        n_obs: (4 * p).max(2000),
        ..ScenarioSpec::basic(2000, sigma_eps2, seed)
    }
}

/// `replicates` selection datasets with independent seeds.
pub fn generate_selection_suite(
    n_strains: usize,
    sigma_eps2: f64,
    replicates: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    (0..replicates)
        .map(|r| generate_basic(&selection_spec(n_strains, sigma_eps2, replicate_seed(seed, r))))
        .collect()
}

/// Larger dataset with factors test, date and antiserum and negative-normal
/// coefficients around `mu_w`.
pub fn fmdv_spec(mu_w: f64, sigma_eps2: f64, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        n_strains: 15,
        n_obs: 3000,
        n_vars: 50,
        factors: vec![
            strain_factor("test", FactorKind::Test),
            generic_factor("date", 20),
            strain_factor("antiserum", FactorKind::Reference),
        ],
        re_inclusion_prob: 1.0,
        re_var_range: (0.2, 0.5),
        weights: WeightDist::NegativeNormal { mean: mu_w, sd: 0.1 },
        pi_range: (0.2, 0.4),
        w0: 10.0,
        sigma_y2: 0.1,
        sigma_eps2,
        seed,
    }
}

pub fn generate_fmdv_like(spec: &ScenarioSpec) -> Result<Dataset> {
    generate_basic(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchSpec {
    pub n: usize,
    pub correlated: bool,
    pub n_pairs: usize,
    pub w_r: f64,
    pub sigma_y2: f64,
    pub sigma_eps2: f64,
    pub seed: u64,
}

impl MismatchSpec {
    pub fn new(n: usize, correlated: bool, seed: u64) -> Self {
        Self {
            n,
            correlated,
            n_pairs: 55,
            w_r: -0.3,
            sigma_y2: 0.1,
            sigma_eps2: 0.1,
            seed,
        }
    }
}

/// Two-feature linear-model data: `x_r` carries signal, `x_ir` none. Both are
/// pair-level indicators expanded to observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchData {
    pub y: Vec<f64>,
    pub x_r: Vec<f64>,
    pub x_ir: Vec<f64>,
    pub pair_of: Vec<usize>,
    pub w_r: f64,
}

/// Features, coefficients and pair map depend only on the seed; the
/// correlated flag adds a pair-level noise term
/// (`cov = sigma_y2 I + sigma_eps2 M M'`) on top of the shared iid noise.
pub fn generate_mismatch(spec: &MismatchSpec) -> Result<MismatchData> {
    if spec.n < spec.n_pairs || spec.n_pairs == 0 {
        return Err(Error::Config(format!("{} observations for {} pairs", spec.n, spec.n_pairs)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let xr: Vec<f64> = (0..spec.n_pairs).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
    let xir: Vec<f64> = (0..spec.n_pairs).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
    let pair_of = cover_then_uniform(spec.n, spec.n_pairs, &mut rng);

    let mut iid = rng.clone();
    iid.set_stream(1);
    let mut pair_noise = rng;
    pair_noise.set_stream(2);
    let delta: Vec<f64> = (0..spec.n_pairs)
        .map(|_| spec.sigma_eps2.sqrt() * std_normal(&mut pair_noise))
        .collect();

    let x_r: Vec<f64> = pair_of.iter().map(|&p| xr[p]).collect();
    let x_ir: Vec<f64> = pair_of.iter().map(|&p| xir[p]).collect();
    let y = pair_of
        .iter()
        .map(|&p| {
            let mut v = spec.w_r * xr[p] + spec.sigma_y2.sqrt() * std_normal(&mut iid);
            if spec.correlated {
                v += delta[p];
            }
            v
        })
        .collect();
    Ok(MismatchData { y, x_r, x_ir, pair_of, w_r: spec.w_r })
}
