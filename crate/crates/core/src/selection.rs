//! Information criteria and cross-validation over random-effect subsets.
//!
//! WAIC-type scores are on the deviance scale (lower is better); integrated
//! CV is a mean log predictive density (higher is better).

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{ln_normal, log_mean_exp};
use crate::error::{Error, Result};
use crate::hyper::Hyperparameters;
use crate::linalg::{cholesky, ln_det};
use crate::model::{ln_compound_symmetric_normal, pair_residuals};
use crate::sampler::{run_chains, ChainSet, SamplerConfig};
use crate::state::{Mode, ModelState};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Waic,
    Nwaic,
    Biwaic,
    Icv,
}

impl CriterionKind {
    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::Waic => "waic",
            CriterionKind::Nwaic => "nwaic",
            CriterionKind::Biwaic => "biwaic",
            CriterionKind::Icv => "icv",
        }
    }

    pub fn lower_is_better(self) -> bool {
        self != CriterionKind::Icv
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A criterion value with its additive contributions. For WAIC-type scores
/// `value = sum(contributions)` (each already on the deviance scale); for
/// iCV `value = mean(contributions)` over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub criterion: CriterionKind,
    pub value: f64,
    pub contributions: Vec<f64>,
}

/// Streaming accumulator of `log mean exp` and the unbiased variance.
#[derive(Debug, Clone, Copy)]
struct LogStats {
    n: usize,
    max: f64,
    /// `sum exp(x - max)`.
    sum: f64,
    mean: f64,
    m2: f64,
}

impl LogStats {
    fn new() -> Self {
        Self { n: 0, max: f64::NEG_INFINITY, sum: 0.0, mean: 0.0, m2: 0.0 }
    }

    fn push(&mut self, x: f64) {
        self.n += 1;
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn log_mean_exp(&self) -> f64 {
        self.max + (self.sum / self.n as f64).ln()
    }

    fn variance(&self) -> f64 {
        self.m2 / (self.n as f64 - 1.0)
    }
}

/// `ln N(y_p | x_p'w* + Z_p b, sigma_y2 I + sigma_eps2 11')`: the pair's
/// observations with its latent mean integrated out.
pub fn log_group_density(data: &Dataset, s: &ModelState, p: usize) -> f64 {
    let mut buf = Vec::new();
    pair_residuals(data, s, p, &mut buf);
    ln_compound_symmetric_normal(&buf, s.sigma_y2, s.sigma_eps2)
}

fn waic_from<F>(set: &ChainSet, n_terms: usize, criterion: CriterionKind, term: F) -> Result<SelectionScore>
where
    F: Fn(&ModelState, &mut Vec<f64>) + Sync,
{
    let states: Vec<&ModelState> = set.states().collect();
    if states.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{criterion} needs at least 2 posterior samples, got {}",
            states.len()
        )));
    }
    let mut acc = vec![LogStats::new(); n_terms];
    let mut buf = Vec::with_capacity(n_terms);
    for s in states {
        buf.clear();
        term(s, &mut buf);
        debug_assert_eq!(buf.len(), n_terms);
        for (a, &l) in acc.iter_mut().zip(&buf) {
            a.push(l);
        }
    }
    let contributions: Vec<f64> = acc.iter().map(|a| -2.0 * (a.log_mean_exp() - a.variance())).collect();
    Ok(SelectionScore { criterion, value: contributions.iter().sum(), contributions })
}

/// Block-integrated WAIC: one term per pair, latent mean integrated.
pub fn biwaic(set: &ChainSet, data: &Dataset) -> Result<SelectionScore> {
    waic_from(set, data.n_pairs(), CriterionKind::Biwaic, |s, out| {
        let mut buf = Vec::new();
        for p in 0..data.n_pairs() {
            pair_residuals(data, s, p, &mut buf);
            out.push(ln_compound_symmetric_normal(&buf, s.sigma_y2, s.sigma_eps2));
        }
    })
}

/// WAIC on observations given the sampled latent means.
pub fn nwaic(set: &ChainSet, data: &Dataset) -> Result<SelectionScore> {
    waic_from(set, data.n_obs(), CriterionKind::Nwaic, |s, out| {
        for i in 0..data.n_obs() {
            let m = s.mu_y[data.obs.pair_id[i]] + data.zb(i, &s.b);
            out.push(ln_normal(data.obs.y[i], m, s.sigma_y2));
        }
    })
}

/// Standard WAIC of the flat model: `y_i ~ N(x_p'w* + z_i'b, sigma_y2)`.
pub fn waic_flat(set: &ChainSet, data: &Dataset) -> Result<SelectionScore> {
    waic_from(set, data.n_obs(), CriterionKind::Waic, |s, out| {
        let eta = s.linear_predictors(data);
        for i in 0..data.n_obs() {
            let m = eta[data.obs.pair_id[i]] + data.zb(i, &s.b);
            out.push(ln_normal(data.obs.y[i], m, s.sigma_y2));
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    Kfold,
    /// One fold per pair.
    Logo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub mode: CvMode,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 10, mode: CvMode::Kfold, seed: 0 }
    }
}

/// Pair folds. K-fold shuffles pairs with a generator seeded by
/// `(seed, n_pairs)` and deals them round-robin.
pub fn fold_partition(n_pairs: usize, cv: &CvConfig) -> Result<Vec<Vec<usize>>> {
    match cv.mode {
        CvMode::Logo => Ok((0..n_pairs).map(|p| vec![p]).collect()),
        CvMode::Kfold => {
            if cv.folds < 2 || cv.folds > n_pairs {
                return Err(Error::Config(format!("{} folds for {n_pairs} pairs", cv.folds)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cv.seed);
            rng.set_stream(n_pairs as u64);
            let mut order: Vec<usize> = (0..n_pairs).collect();
            order.shuffle(&mut rng);
            let mut folds = vec![Vec::new(); cv.folds];
            for (i, p) in order.into_iter().enumerate() {
                folds[i % cv.folds].push(p);
            }
            for f in &mut folds {
                f.sort_unstable();
            }
            Ok(folds)
        }
    }
}

/// `ln p(y_fold | s)` with latent means integrated per pair and, for random
/// effect groups listed in `unseen`, the coefficient integrated as well
/// (variance `sigma_b2` of its factor). `unseen` holds global coefficient
/// indices.
pub fn fold_log_density(data: &Dataset, s: &ModelState, pairs: &[usize], unseen: &[usize]) -> Result<f64> {
    let mut buf = Vec::new();
    let mut b = s.b.clone();
    for &c in unseen {
        b[c] = 0.0;
    }
    let sb = ModelState { b, ..s.clone() };
    if unseen.is_empty() {
        return Ok(pairs
            .iter()
            .map(|&p| {
                pair_residuals(data, &sb, p, &mut buf);
                ln_compound_symmetric_normal(&buf, s.sigma_y2, s.sigma_eps2)
            })
            .sum());
    }
    // cov = B + U S U' with B block-diagonal over pairs; Woodbury on the
    // unseen coefficients.
    let slot: std::collections::HashMap<usize, usize> = unseen.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let m = unseen.len();
    let factor_of = data.layout.factor_of_coef();
    let (a, c) = (s.sigma_y2, s.sigma_eps2);
    let mut quad = 0.0;
    let mut logdet = 0.0;
    let mut n_total = 0usize;
    let mut utbr = DVector::zeros(m);
    let mut utbu = DMatrix::zeros(m, m);
    let mut cols: Vec<Vec<usize>> = Vec::new();
    for &p in pairs {
        pair_residuals(data, &sb, p, &mut buf);
        let rows = &data.pair_obs()[p];
        let n = rows.len() as f64;
        n_total += rows.len();
        let denom = a + n * c;
        logdet += (n - 1.0) * a.ln() + denom.ln();
        // B_p^-1 v = (v - c * sum(v) / denom * 1) / a
        let binv = |v: &[f64]| -> Vec<f64> {
            let sv: f64 = v.iter().sum();
            v.iter().map(|x| (x - c * sv / denom) / a).collect()
        };
        let br = binv(&buf);
        quad += buf.iter().zip(&br).map(|(r, q)| r * q).sum::<f64>();
        cols.clear();
        cols.extend(rows.iter().map(|&i| data.coefs_of(i).filter_map(|co| slot.get(&co).copied()).collect()));
        // U_p' B_p^-1 r and U_p' B_p^-1 U_p, with U_p[i, slot] = 1.
        for (li, cs) in cols.iter().enumerate() {
            for &k in cs {
                utbr[k] += br[li];
            }
        }
        for k in 0..m {
            let u: Vec<f64> = cols.iter().map(|cs| if cs.contains(&k) { 1.0 } else { 0.0 }).collect();
            if u.iter().all(|&v| v == 0.0) {
                continue;
            }
            let bu = binv(&u);
            for (li, cs) in cols.iter().enumerate() {
                for &l in cs {
                    utbu[(l, k)] += bu[li];
                }
            }
        }
    }
    let mut inner = utbu;
    let mut ln_s = 0.0;
    for (k, &co) in unseen.iter().enumerate() {
        let v = s.sigma_b2[factor_of[co]];
        inner[(k, k)] += 1.0 / v;
        ln_s += v.ln();
    }
    let chol = cholesky(inner, "unseen-group Woodbury matrix")?;
    quad -= utbr.dot(&chol.solve(&utbr));
    logdet += ln_s + ln_det(&chol);
    Ok(-0.5 * (n_total as f64 * LN_2PI + logdet + quad))
}

/// Coefficients used by `test` observations but by no `train` observation.
fn unseen_coefs(data: &Dataset, train: &[usize], test: &[usize]) -> Vec<usize> {
    let mut seen = vec![false; data.n_coefs()];
    for &p in train {
        for &i in &data.pair_obs()[p] {
            for c in data.coefs_of(i) {
                seen[c] = true;
            }
        }
    }
    let mut out: Vec<usize> = test
        .iter()
        .flat_map(|&p| data.pair_obs()[p].iter().flat_map(|&i| data.coefs_of(i)))
        .filter(|&c| !seen[c])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Fold term of integrated CV from an already fitted training posterior.
/// `data` is the full dataset; the training fit must share its coefficient
/// layout.
pub fn fold_score(data: &Dataset, set: &ChainSet, train: &[usize], test: &[usize]) -> Result<f64> {
    let unseen = unseen_coefs(data, train, test);
    let mut logs = Vec::with_capacity(set.n_samples());
    for s in set.states() {
        // The training fit indexes pairs `0..train.len()`; predictions for
        // held-out pairs only need w*, b and the variances.
        logs.push(fold_log_density(data, s, test, &unseen)?);
    }
    Ok(log_mean_exp(&logs))
}

/// Integrated cross-validation over pair folds.
pub fn integrated_cv(
    data: &Dataset,
    hyper: &Hyperparameters,
    config: &SamplerConfig,
    cv: &CvConfig,
) -> Result<(SelectionScore, bool)> {
    let folds = fold_partition(data.n_pairs(), cv)?;
    let results: Vec<Result<(f64, bool)>> = folds
        .par_iter()
        .map(|test| {
            let train: Vec<usize> = (0..data.n_pairs()).filter(|p| test.binary_search(p).is_err()).collect();
            let sub = data.subset_pairs(&train)?;
            let set = run_chains(&sub, hyper, config)?;
            Ok((fold_score(data, &set, &train, test)?, set.converged))
        })
        .collect();
    let mut contributions = Vec::with_capacity(folds.len());
    let mut converged = true;
    for r in results {
        let (v, c) = r?;
        contributions.push(v);
        converged &= c;
    }
    let value = contributions.iter().sum::<f64>() / contributions.len() as f64;
    Ok((SelectionScore { criterion: CriterionKind::Icv, value, contributions }, converged))
}

/// Subset of random-effect factors, as indices into the full layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct REModelSpec {
    pub included_factors: Vec<usize>,
}

impl REModelSpec {
    pub fn all(k: usize) -> Vec<REModelSpec> {
        (0..1usize << k)
            .map(|mask| REModelSpec { included_factors: (0..k).filter(|&f| mask >> f & 1 == 1).collect() })
            .collect()
    }

    /// `+`-joined factor names, `none` for the empty spec.
    pub fn label(&self, names: &[String]) -> String {
        if self.included_factors.is_empty() {
            "none".into()
        } else {
            self.included_factors.iter().map(|&k| names[k].as_str()).collect::<Vec<_>>().join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecScore {
    pub spec: REModelSpec,
    pub label: String,
    pub score: SelectionScore,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Best spec per requested criterion, in request order; `None` when no
    /// spec converged.
    pub best: Vec<(CriterionKind, Option<REModelSpec>)>,
    pub table: Vec<SpecScore>,
}

impl SelectionResult {
    pub fn best_for(&self, c: CriterionKind) -> Option<&REModelSpec> {
        self.best.iter().find(|(k, _)| *k == c).and_then(|(_, s)| s.as_ref())
    }

    /// `spec,criterion,value,converged`, one row per spec and criterion.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("spec,criterion,value,converged\n");
        for row in &self.table {
            s.push_str(&format!("{},{},{},{}\n", row.label, row.score.criterion, row.score.value, row.converged));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection result serialises")
    }
}

/// Argmin (or argmax for iCV) over converged rows of one criterion; ties go
/// to fewer factors, then to the earlier spec.
pub fn pick_best(table: &[SpecScore], criterion: CriterionKind) -> Option<REModelSpec> {
    let better = |a: f64, b: f64| if criterion.lower_is_better() { a < b } else { a > b };
    let mut best: Option<&SpecScore> = None;
    for row in table.iter().filter(|r| r.converged && r.score.criterion == criterion) {
        best = match best {
            None => Some(row),
            Some(b) => {
                let (x, y) = (row.score.value, b.score.value);
                if better(x, y) || (x == y && row.spec.included_factors.len() < b.spec.included_factors.len()) {
                    Some(row)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.map(|r| r.spec.clone())
}

/// Scores of one fitted spec for every WAIC-type criterion requested.
fn waic_scores(set: &ChainSet, data: &Dataset, criteria: &[CriterionKind]) -> Result<Vec<SelectionScore>> {
    criteria
        .iter()
        .filter(|c| **c != CriterionKind::Icv)
        .map(|c| match c {
            CriterionKind::Biwaic => biwaic(set, data),
            CriterionKind::Nwaic => nwaic(set, data),
            CriterionKind::Waic => waic_flat(set, data),
            CriterionKind::Icv => unreachable!(),
        })
        .collect()
}

/// Fits every subset of the random-effect factors and scores it. WAIC-type
/// criteria share one fit per spec; iCV runs its own fold fits. Specs whose
/// fit did not converge are reported but never selected.
pub fn select_re_model(
    data: &Dataset,
    hyper: &Hyperparameters,
    config: &SamplerConfig,
    criteria: &[CriterionKind],
    cv: &CvConfig,
) -> Result<SelectionResult> {
    let k = data.n_factors();
    if k > 6 {
        return Err(Error::Config(format!("{k} factors: exhaustive selection supports at most 6")));
    }
    if criteria.contains(&CriterionKind::Waic) && config.mode != Mode::SabreFlat {
        return Err(Error::Config("waic scores flat-model chains; set mode = sabre_flat".into()));
    }
    let hyper = hyper.for_factors(k)?;
    let specs = REModelSpec::all(k);
    let wants_waic = criteria.iter().any(|c| *c != CriterionKind::Icv);
    let mut table = Vec::new();
    for spec in &specs {
        let sub = data.with_factors(&spec.included_factors)?;
        let h = hyper.select_factors(&spec.included_factors);
        let label = spec.label(&data.layout.names);
        let mut scores = Vec::new();
        if wants_waic {
            let set = run_chains(&sub, &h, config)?;
            for sc in waic_scores(&set, &sub, criteria)? {
                scores.push((sc, set.converged));
            }
        }
        if criteria.contains(&CriterionKind::Icv) {
            scores.push(integrated_cv(&sub, &h, config, cv)?);
        }
        for c in criteria {
            let (score, converged) = scores.iter().find(|(s, _)| s.criterion == *c).cloned().expect("scored");
            table.push(SpecScore { spec: spec.clone(), label: label.clone(), score, converged });
        }
    }
    let best = criteria.iter().map(|&c| (c, pick_best(&table, c))).collect();
    Ok(SelectionResult { best, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ObservationTable, PairDesign, RandomEffectsLayout};
    use crate::sampler::ChainStore;
    use esabre_testkit::de;
    use proptest::prelude::*;
    use rand::Rng;

    fn dataset(rng: &mut ChaCha8Rng, reps: &[usize], k_groups: &[usize]) -> Dataset {
        let p = reps.len();
        let x = DMatrix::from_fn(p, 3, |_, c| if c == 0 || rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let pair_id: Vec<usize> = reps.iter().enumerate().flat_map(|(q, &r)| std::iter::repeat_n(q, r)).collect();
        let n = pair_id.len();
        let k_groups: Vec<usize> = k_groups.iter().map(|&g| g.min(n)).collect();
        let groups: Vec<Vec<usize>> = k_groups.iter().map(|&g| (0..n).map(|i| i % g).collect()).collect();
        let names: Vec<String> = (0..k_groups.len()).map(|i| format!("f{i}")).collect();
        let obs = ObservationTable {
            obs_id: (0..n as i64).collect(),
            y: (0..n).map(|_| rng.random_range(-1.0..3.0)).collect(),
            pair_id,
            groups,
            factor_names: names.clone(),
        };
        Dataset::new(obs, PairDesign::new(x).unwrap(), RandomEffectsLayout::new(names, k_groups).unwrap(), None)
            .unwrap()
    }

    fn state(rng: &mut ChaCha8Rng, d: &Dataset) -> ModelState {
        ModelState {
            mu_y: (0..d.n_pairs()).map(|_| rng.random_range(0.0..2.0)).collect(),
            w0: rng.random_range(0.0..2.0),
            w: vec![rng.random_range(-1.0..0.0), 0.0],
            gamma: vec![true, false],
            mu_w: -0.3,
            sigma_y2: rng.random_range(0.1..1.0),
            sigma_eps2: rng.random_range(0.1..1.0),
            sigma_w2: 1.0,
            b: (0..d.n_coefs()).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sigma_b2: (0..d.n_factors()).map(|_| rng.random_range(0.1..1.0)).collect(),
            pi: 0.3,
        }
    }

    fn set_of(states: Vec<ModelState>) -> ChainSet {
        let n = states.len();
        ChainSet {
            chains: vec![ChainStore {
                chain_index: 0,
                seed: 0,
                burn_in: 0,
                converged: true,
                iterations: (1..=n).collect(),
                states,
            }],
            converged: true,
            burn_in: 0,
        }
    }

    fn dense_group(d: &Dataset, s: &ModelState, p: usize) -> f64 {
        let rows = &d.pair_obs()[p];
        let n = rows.len();
        let eta = s.linear_predictor(d, p);
        let r = DVector::from_iterator(n, rows.iter().map(|&i| d.obs.y[i] - eta - d.zb(i, &s.b)));
        let cov = DMatrix::from_fn(n, n, |a, b| s.sigma_eps2 + if a == b { s.sigma_y2 } else { 0.0 });
        let chol = cov.cholesky().unwrap();
        -0.5 * (n as f64 * LN_2PI + ln_det(&chol) + r.dot(&chol.solve(&r)))
    }

    #[test]
    fn group_density_scalar_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = dataset(&mut rng, &[1, 2], &[2]);
        let s = state(&mut rng, &d);
        let i = d.pair_obs()[0][0];
        let m = s.linear_predictor(&d, 0) + d.zb(i, &s.b);
        let want = ln_normal(d.obs.y[i], m, s.sigma_y2 + s.sigma_eps2);
        assert!((log_group_density(&d, &s, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn group_density_matches_latent_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n_p in [1usize, 2, 7] {
            let d = dataset(&mut rng, &[n_p], &[3]);
            let s = state(&mut rng, &d);
            let eta = s.linear_predictor(&d, 0);
            let rows = d.pair_obs()[0].clone();
            let f = |mu: f64| {
                let mut l = ln_normal(mu, eta, s.sigma_eps2);
                for &i in &rows {
                    l += ln_normal(d.obs.y[i], mu + d.zb(i, &s.b), s.sigma_y2);
                }
                l.exp()
            };
            let q = de::line(f, eta, s.sigma_eps2.sqrt(), 1e-12).ln();
            let got = log_group_density(&d, &s, 0);
            assert!((got - q).abs() < 1e-6, "n_p = {n_p}: {got} vs {q}");
            assert!((got - dense_group(&d, &s, 0)).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn group_density_matches_dense(n_p in 1usize..=50, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = dataset(&mut rng, &[n_p], &[3, 2]);
            let s = state(&mut rng, &d);
            prop_assert!((log_group_density(&d, &s, 0) - dense_group(&d, &s, 0)).abs() < 1e-10);
        }

        #[test]
        fn waic_is_permutation_invariant(seed in any::<u64>(), n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = dataset(&mut rng, &[2, 1, 3], &[2]);
            let states: Vec<ModelState> = (0..n).map(|_| state(&mut rng, &d)).collect();
            let mut shuffled = states.clone();
            shuffled.shuffle(&mut rng);
            let (a, b) = (set_of(states), set_of(shuffled));
            for f in [biwaic, nwaic, waic_flat] {
                let x = f(&a, &d).unwrap().value;
                let y = f(&b, &d).unwrap().value;
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn degenerate_chain_has_no_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dataset(&mut rng, &[2, 3], &[2]);
        let s = state(&mut rng, &d);
        let set = set_of(vec![s.clone(); 5]);
        let bi = biwaic(&set, &d).unwrap();
        let want: f64 = (0..2).map(|p| -2.0 * log_group_density(&d, &s, p)).sum();
        assert!((bi.value - want).abs() < 1e-9);
        let nw = nwaic(&set, &d).unwrap();
        let want: f64 = (0..d.n_obs())
            .map(|i| -2.0 * ln_normal(d.obs.y[i], s.mu_y[d.obs.pair_id[i]] + d.zb(i, &s.b), s.sigma_y2))
            .sum();
        assert!((nw.value - want).abs() < 1e-9);
        assert!((bi.contributions.iter().sum::<f64>() - bi.value).abs() < 1e-12);
    }

    #[test]
    fn two_point_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = dataset(&mut rng, &[3], &[2]);
        let (s1, s2) = (state(&mut rng, &d), state(&mut rng, &d));
        let (a, b) = (log_group_density(&d, &s1, 0), log_group_density(&d, &s2, 0));
        let got = biwaic(&set_of(vec![s1, s2]), &d).unwrap().value;
        let lme = log_mean_exp(&[a, b]);
        assert!((got + 2.0 * (lme - (a - b).powi(2) / 2.0)).abs() < 1e-10);
    }

    #[test]
    fn single_sample_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = dataset(&mut rng, &[1], &[1]);
        let s = state(&mut rng, &d);
        assert!(biwaic(&set_of(vec![s]), &d).is_err());
    }

    #[test]
    fn identity_incidence_biwaic_matches_nwaic_with_marginal_noise() {
        // One observation per pair: a group term is N(y | eta + zb,
        // sigma_y2 + sigma_eps2), which is nWAIC's term once mu_y sits at
        // the linear predictor and the noise absorbs sigma_eps2.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = dataset(&mut rng, &[1, 1, 1], &[2]);
        let states: Vec<ModelState> = (0..4)
            .map(|_| {
                let mut s = state(&mut rng, &d);
                s.mu_y = s.linear_predictors(&d);
                s
            })
            .collect();
        let bi = biwaic(&set_of(states.clone()), &d).unwrap();
        let shifted: Vec<ModelState> = states
            .into_iter()
            .map(|s| ModelState { sigma_y2: s.sigma_y2 + s.sigma_eps2, ..s })
            .collect();
        let nw = nwaic(&set_of(shifted), &d).unwrap();
        for (x, y) in bi.contributions.iter().zip(&nw.contributions) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn flat_waic_matches_nwaic_at_linear_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = dataset(&mut rng, &[2, 1, 3], &[2]);
        let states: Vec<ModelState> = (0..4)
            .map(|_| {
                let mut s = state(&mut rng, &d);
                s.sigma_eps2 = 0.0;
                s.mu_y = s.linear_predictors(&d);
                s
            })
            .collect();
        let set = set_of(states);
        let a = waic_flat(&set, &d).unwrap().value;
        let b = nwaic(&set, &d).unwrap().value;
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn logo_fold_term_equals_group_density_for_one_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = dataset(&mut rng, &[2, 3, 1], &[2]);
        let s = state(&mut rng, &d);
        let set = set_of(vec![s.clone()]);
        let folds = fold_partition(3, &CvConfig { mode: CvMode::Logo, ..CvConfig::default() }).unwrap();
        for test in &folds {
            // Every group appears in the other pairs, so nothing is unseen.
            let train: Vec<usize> = (0..3).filter(|p| !test.contains(p)).collect();
            let got = fold_score(&d, &set, &train, test).unwrap();
            assert!((got - log_group_density(&d, &s, test[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn unseen_groups_are_integrated_out() {
        // Dense oracle: covariance sigma_y2 I + sigma_eps2 M M' + sigma_b2 U U'.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = dataset(&mut rng, &[2, 3], &[3, 2]);
        let s = state(&mut rng, &d);
        let unseen = vec![1usize, 4];
        let got = fold_log_density(&d, &s, &[0, 1], &unseen).unwrap();
        let n = d.n_obs();
        let factor_of = d.layout.factor_of_coef();
        let mut b0 = s.b.clone();
        for &c in &unseen {
            b0[c] = 0.0;
        }
        let r = DVector::from_iterator(
            n,
            (0..n).map(|i| d.obs.y[i] - s.linear_predictor(&d, d.obs.pair_id[i]) - d.zb(i, &b0)),
        );
        let cov = DMatrix::from_fn(n, n, |a, b| {
            let mut v = if a == b { s.sigma_y2 } else { 0.0 };
            if d.obs.pair_id[a] == d.obs.pair_id[b] {
                v += s.sigma_eps2;
            }
            for &c in &unseen {
                if d.coefs_of(a).any(|x| x == c) && d.coefs_of(b).any(|x| x == c) {
                    v += s.sigma_b2[factor_of[c]];
                }
            }
            v
        });
        let chol = cov.cholesky().unwrap();
        let want = -0.5 * (n as f64 * LN_2PI + ln_det(&chol) + r.dot(&chol.solve(&r)));
        assert!((got - want).abs() < 1e-10, "{got} {want}");
    }

    #[test]
    fn fold_partition_is_reproducible() {
        let cv = CvConfig { folds: 4, mode: CvMode::Kfold, seed: 3 };
        let a = fold_partition(10, &cv).unwrap();
        assert_eq!(a, fold_partition(10, &cv).unwrap());
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(a.iter().all(|f| f.len() == 2 || f.len() == 3));
        assert!(fold_partition(10, &CvConfig { folds: 1, ..cv }).is_err());
    }

    #[test]
    fn duplicated_pairs_give_equal_fold_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut d = dataset(&mut rng, &[2, 2], &[2]);
        // Make pair 1 a copy of pair 0.
        let rows0 = d.pair_obs()[0].clone();
        let rows1 = d.pair_obs()[1].clone();
        let mut obs = d.obs.clone();
        for (&a, &b) in rows0.iter().zip(&rows1) {
            obs.y[b] = obs.y[a];
            obs.groups[0][b] = obs.groups[0][a];
        }
        let mut x = d.design.x.clone();
        for c in 0..x.ncols() {
            x[(1, c)] = x[(0, c)];
        }
        d = Dataset::new(obs, PairDesign::new(x).unwrap(), d.layout.clone(), None).unwrap();
        let s = state(&mut rng, &d);
        let set = set_of(vec![s.clone(), state(&mut rng, &d)]);
        let a = fold_score(&d, &set, &[1], &[0]).unwrap();
        let b = fold_score(&d, &set, &[0], &[1]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn spec_enumeration_and_ties() {
        assert_eq!(REModelSpec::all(0), vec![REModelSpec { included_factors: vec![] }]);
        assert_eq!(REModelSpec::all(4).len(), 16);
        let row = |f: Vec<usize>, v: f64, conv: bool| SpecScore {
            label: String::new(),
            spec: REModelSpec { included_factors: f },
            score: SelectionScore { criterion: CriterionKind::Biwaic, value: v, contributions: vec![] },
            converged: conv,
        };
        let table = vec![row(vec![0, 1], 5.0, true), row(vec![1], 5.0, true), row(vec![], 1.0, false)];
        assert_eq!(pick_best(&table, CriterionKind::Biwaic).unwrap().included_factors, vec![1]);
        assert!(pick_best(&table[2..], CriterionKind::Biwaic).is_none());
    }
}
