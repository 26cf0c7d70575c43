//! Subcommand bodies. Every output is a function of the inputs and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use esabre::data::load_dataset;
use esabre::diagnostics::{auroc, classify, confusion_metrics, roc_curve, MetricReport, SelectionRule};
use esabre::sampler::{posterior_psrf, read_chain_set, run_chains, write_chain_set, ChainSet};
use esabre::selection::{select_re_model, SelectionResult, SpecScore};
use esabre::simulate::{fmdv_spec, generate_basic, selection_spec, ScenarioSpec};
use esabre::subposterior::{
    combine_subposteriors, fit_shards, partition_by, prior_correct, sufficiently_disperse, ModelDims,
    PriorFamilySpec, ShardSummary,
};
use esabre::{Dataset, Hyperparameters};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{cv_mode, DiagnoseArgs, Failure, RunArgs, Scenario, SelectArgs, ShardArgs, SimulateArgs, CombineArgs};

/// Stream of the prior-correction RNG; chains use streams `1..=n_chains`.
pub const CORRECTION_STREAM: u64 = u64::MAX;

fn require_dir(p: &Path) -> Result<(), Failure> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("output directory {} does not exist", p.display())))
    }
}

fn put(dir: &Path, name: &str, body: &str) -> Result<(), Failure> {
    let p = dir.join(name);
    fs::write(&p, body).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", p.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serialises") + "\n"
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    let truth = dir.join("truth.json");
    let truth = truth.is_file().then_some(truth);
    Ok(load_dataset(&dir.join("observations.csv"), &dir.join("design.csv"), None, truth.as_deref())?)
}

/// Keeps the named factors, in the dataset's order.
fn factor_subset(data: &Dataset, names: Option<&[String]>) -> Result<Vec<usize>, Failure> {
    let all = &data.layout.names;
    match names {
        None => Ok((0..all.len()).collect()),
        Some(names) => {
            for n in names {
                if !all.contains(n) {
                    return Err(Failure::Usage(format!("unknown random-effect factor `{n}` (have {all:?})")));
                }
            }
            Ok((0..all.len()).filter(|&i| names.contains(&all[i])).collect())
        }
    }
}

/// Dataset and hyperparameters restricted to the configured factors. The
/// resolved hyperparameters go back into `cfg` so the echo records them.
fn prepare(cfg: &mut RunConfig, data: Dataset) -> Result<(Dataset, Hyperparameters), Failure> {
    let k = data.n_factors();
    let keep = factor_subset(&data, cfg.re_factors.as_deref())?;
    let hyper = cfg.hyper.clone().unwrap_or_else(|| Hyperparameters::defaults(k)).for_factors(k)?;
    hyper.validate()?;
    cfg.hyper = Some(hyper.clone());
    if keep.len() == k {
        Ok((data, hyper))
    } else {
        Ok((data.with_factors(&keep)?, hyper.select_factors(&keep)))
    }
}

fn resolve(a: &RunArgs) -> Result<RunConfig, Failure> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.data.is_some() {
        c.data.clone_from(&a.data);
    }
    if a.out.is_some() {
        c.output.clone_from(&a.out);
    }
    if a.seed.is_some() {
        c.seed = a.seed;
    }
    if let Some(m) = a.mode {
        c.mode = Some(m.into());
    }
    let s = &mut c.sampler;
    if let Some(v) = a.n_chains {
        s.n_chains = v;
    }
    if let Some(v) = a.n_samples {
        s.n_samples = v;
    }
    if let Some(v) = a.thin {
        s.thin = v;
    }
    if let Some(v) = a.max_iterations {
        s.max_iterations = v;
    }
    if a.re_factors.is_some() {
        c.re_factors.clone_from(&a.re_factors);
    }
    c.finish()
}

pub fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    require_dir(&a.out)?;
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<ScenarioSpec>(&text).map_err(|e| Failure::Usage(format!("invalid scenario: {e}")))?
        }
        None => {
            let seed = a.seed.ok_or_else(|| Failure::Usage("--seed is required".into()))?;
            let n = a.n_obs.unwrap_or(2000);
            match a.scenario {
                Scenario::Sd1 => ScenarioSpec::sd1(n, seed),
                Scenario::Sd2 => ScenarioSpec::sd2(n, seed),
                Scenario::Sd3 => ScenarioSpec::sd3(n, seed),
                Scenario::Selection => selection_spec(a.n_strains.unwrap_or(10), a.sigma2.unwrap_or(0.1), seed),
                Scenario::Fmdv => fmdv_spec(a.mu_w.unwrap_or(-0.3), a.sigma2.unwrap_or(0.1), seed),
            }
        }
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_obs {
        spec.n_obs = n;
    }
    if let Some(n) = a.n_strains {
        spec.n_strains = n;
    }
    if let Some(v) = a.sigma2 {
        spec.sigma_eps2 = v;
        if matches!(a.scenario, Scenario::Sd1 | Scenario::Sd2 | Scenario::Sd3) && a.spec.is_none() {
            spec.sigma_y2 = v;
        }
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = generate_basic(&spec)?;
    esabre::data::write_dataset(&data, &a.out)?;
    put(&a.out, "scenario.json", &(spec.to_json() + "\n"))?;
    println!("wrote {} observations over {} pairs to {}", data.n_obs(), data.n_pairs(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Psrf {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct FitSummary {
    converged: bool,
    burn_in: usize,
    n_samples: usize,
    pi_hat: f64,
    random_effects: Vec<String>,
    inclusion: Vec<f64>,
    psrf: Vec<Psrf>,
}

fn fit_summary(set: &ChainSet, data: &Dataset) -> Result<FitSummary, Failure> {
    let psrf = posterior_psrf(set, data)?.into_iter().map(|(name, value)| Psrf { name, value }).collect();
    Ok(FitSummary {
        converged: set.converged,
        burn_in: set.burn_in,
        n_samples: set.n_samples(),
        pi_hat: set.pi_hat(),
        random_effects: data.layout.names.clone(),
        inclusion: set.inclusion_probabilities(),
        psrf,
    })
}

fn inclusion_csv(cols: &[(&str, &[f64])]) -> String {
    let mut s = String::from("j");
    for (name, _) in cols {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for j in 0..cols.first().map_or(0, |c| c.1.len()) {
        s.push_str(&j.to_string());
        for (_, v) in cols {
            s.push_str(&format!(",{}", v[j]));
        }
        s.push('\n');
    }
    s
}

pub fn fit(a: &RunArgs) -> Result<(), Failure> {
    let mut cfg = resolve(a)?;
    let out = cfg.output_dir()?.to_path_buf();
    require_dir(&out)?;
    let data = load_data(cfg.data_dir()?)?;
    let (data, hyper) = prepare(&mut cfg, data)?;
    let set = run_chains(&data, &hyper, &cfg.sampler)?;
    write_chain_set(&set, &cfg.sampler, &out.join("chains"))?;
    let summary = fit_summary(&set, &data)?;
    put(&out, "summary.json", &json(&summary))?;
    put(&out, "inclusion.csv", &inclusion_csv(&[("inclusion", &summary.inclusion)]))?;
    put(&out, "config.json", &cfg.echo())?;
    println!("converged: {}, burn-in {}, pi_hat {:.4}", set.converged, set.burn_in, summary.pi_hat);
    if set.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!("chains did not converge in {} iterations", cfg.sampler.max_iterations)))
    }
}

/// Rows grouped by criterion in request order, each group best first;
/// non-converged rows last, ties to fewer factors.
fn sorted_table(res: &SelectionResult) -> Vec<SpecScore> {
    let mut rows = Vec::new();
    for (c, _) in &res.best {
        let mut group: Vec<SpecScore> = res.table.iter().filter(|r| r.score.criterion == *c).cloned().collect();
        group.sort_by(|x, y| {
            let by_value = if c.lower_is_better() {
                x.score.value.total_cmp(&y.score.value)
            } else {
                y.score.value.total_cmp(&x.score.value)
            };
            y.converged
                .cmp(&x.converged)
                .then(by_value)
                .then(x.spec.included_factors.len().cmp(&y.spec.included_factors.len()))
        });
        rows.extend(group);
    }
    rows
}

pub fn select_re(a: &SelectArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&a.run)?;
    if let Some(c) = &a.criterion {
        cfg.selection.criteria = c.iter().map(|&c| c.into()).collect();
    }
    if let Some(f) = a.folds {
        cfg.selection.cv.folds = f;
    }
    if a.logo {
        cfg.selection.cv.mode = cv_mode(true);
    }
    let out = cfg.output_dir()?.to_path_buf();
    require_dir(&out)?;
    let data = load_data(cfg.data_dir()?)?;
    let (data, hyper) = prepare(&mut cfg, data)?;
    let res = select_re_model(&data, &hyper, &cfg.sampler, &cfg.selection.criteria, &cfg.selection.cv)?;
    let res = SelectionResult { table: sorted_table(&res), ..res };
    put(&out, "selection.csv", &res.to_csv())?;
    put(&out, "selection.json", &(res.to_json() + "\n"))?;
    put(&out, "config.json", &cfg.echo())?;
    print!("{}", res.to_csv());
    for (c, best) in &res.best {
        let label = best.as_ref().map_or("(no converged spec)".to_string(), |s| s.label(&data.layout.names));
        println!("best {c}: {label}");
    }
    match res.best.first() {
        Some((c, None)) => Err(Failure::NotConverged(format!("no spec converged under {c}"))),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct DiagnoseReport {
    #[serde(flatten)]
    fit: FitSummary,
    metrics: Option<MetricReport>,
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<(), Failure> {
    let (set, _) = read_chain_set(&a.chains)?;
    let data = load_data(&a.data)?;
    let n_coefs = set.states().next().map_or(0, |s| s.b.len());
    if n_coefs != data.n_coefs() {
        return Err(Failure::Usage(format!(
            "chains carry {n_coefs} random-effect coefficients but the dataset has {}",
            data.n_coefs()
        )));
    }
    let fit = fit_summary(&set, &data)?;
    let metrics = match &data.truth {
        Some(t) => {
            let truth = t.gamma_bool();
            let rule = match a.rule {
                crate::RuleArg::Threshold => SelectionRule::FixedThreshold(a.threshold),
                crate::RuleArg::TopPi => SelectionRule::TopPiHat(fit.pi_hat),
            };
            let mut m = confusion_metrics(&classify(&fit.inclusion, rule), &truth)?;
            m.auroc = auroc(&fit.inclusion, &truth).ok();
            m.rule = Some(rule);
            Some(m)
        }
        None => None,
    };
    let body = json(&DiagnoseReport { fit, metrics });
    match &a.out {
        Some(p) => fs::write(p, body).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", p.display())))?,
        None => print!("{body}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct ShardRow {
    index: usize,
    n_obs: usize,
    n_pairs: usize,
    converged: bool,
    burn_in: usize,
}

#[derive(Serialize)]
struct ShardFitSummary {
    corrected: bool,
    correction_rounds: Option<usize>,
    shards: Vec<ShardRow>,
}

pub fn shard_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("shard_{i}"))
}

pub fn shard_fit(a: &ShardArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&a.run)?;
    if let Some(k) = a.shards {
        cfg.shards.k = k;
    }
    if let Some(u) = a.unit {
        cfg.shards.unit = u.into();
    }
    if a.no_correct {
        cfg.shards.correct = false;
    }
    let out = cfg.output_dir()?.to_path_buf();
    require_dir(&out)?;
    let data = load_data(cfg.data_dir()?)?;
    let (data, hyper) = prepare(&mut cfg, data)?;
    let sc = &cfg.shards;
    let (plan, shards) = partition_by(&data, sc.k, cfg.seed(), sc.unit)?;
    let (shard_hyper, rounds) = if sc.correct {
        let target = PriorFamilySpec::from_hyper(&hyper, ModelDims::of(&data))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
        rng.set_stream(CORRECTION_STREAM);
        let corr = prior_correct(&target, sc.k, sufficiently_disperse, sc.max_rounds, sc.correction_samples, &mut rng)?;
        put(&out, "correction.json", &json(&corr))?;
        (corr.nominal.to_hyper()?, Some(corr.rounds))
    } else {
        (hyper, None)
    };
    let sets = fit_shards(&shards, &shard_hyper, &cfg.sampler)?;
    let mut rows = Vec::new();
    for (i, (set, d)) in sets.iter().zip(&shards).enumerate() {
        write_chain_set(set, &cfg.sampler, &shard_dir(&out, i))?;
        rows.push(ShardRow { index: i, n_obs: d.n_obs(), n_pairs: d.n_pairs(), converged: set.converged, burn_in: set.burn_in });
    }
    let failed = rows.iter().filter(|r| !r.converged).count();
    put(&out, "plan.json", &json(&plan))?;
    put(&out, "shards.json", &json(&ShardFitSummary { corrected: sc.correct, correction_rounds: rounds, shards: rows }))?;
    put(&out, "config.json", &cfg.echo())?;
    println!("{} shards fitted, {failed} not converged", sets.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!("{failed} of {} shards did not converge", sets.len())))
    }
}

/// `shard_<i>` directories under `root`, by index.
fn shard_dirs(root: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(root).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", root.display())))?;
    let mut idx: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("shard_")?.parse().ok())
        .collect();
    idx.sort_unstable();
    if idx.is_empty() {
        return Err(Failure::Usage(format!("no shard_<i> directories in {}", root.display())));
    }
    Ok(idx.into_iter().map(|i| shard_dir(root, i)).collect())
}

#[derive(Serialize)]
struct RocReport {
    combined: Option<f64>,
    full: Option<f64>,
}

pub fn combine(a: &CombineArgs) -> Result<(), Failure> {
    require_dir(&a.out)?;
    let summaries = shard_dirs(&a.shards)?
        .iter()
        .map(|d| read_chain_set(d).map_err(Failure::from).and_then(|(s, _)| Ok(ShardSummary::from_chain_set(&s)?)))
        .collect::<Result<Vec<_>, _>>()?;
    let combined = combine_subposteriors(&summaries)?;
    put(&a.out, "combined.json", &json(&combined))?;
    let full = match &a.full {
        Some(d) => Some(read_chain_set(d)?.0.inclusion_probabilities()),
        None => None,
    };
    if let Some(f) = &full {
        if f.len() != combined.inclusion.len() {
            return Err(Failure::Usage("full-data chains and shards differ in feature count".into()));
        }
    }
    let mut cols: Vec<(&str, &[f64])> = vec![("combined", &combined.inclusion)];
    if let Some(f) = &full {
        cols.push(("full", f));
    }
    put(&a.out, "inclusion.csv", &inclusion_csv(&cols))?;
    let truth = match &a.data {
        Some(d) => load_data(d)?.truth.map(|t| t.gamma_bool()),
        None => None,
    };
    if let Some(t) = truth {
        if t.len() != combined.inclusion.len() {
            return Err(Failure::Usage("truth and shards differ in feature count".into()));
        }
        let mut roc = String::from("curve,fpr,tpr\n");
        for (name, v) in &cols {
            for (x, y) in roc_curve(v, &t) {
                roc.push_str(&format!("{name},{x},{y}\n"));
            }
        }
        put(&a.out, "roc.csv", &roc)?;
        let report = RocReport {
            combined: auroc(&combined.inclusion, &t).ok(),
            full: full.as_ref().and_then(|f| auroc(f, &t).ok()),
        };
        put(&a.out, "auroc.json", &json(&report))?;
        println!("auroc combined {:?}, full {:?}", report.combined, report.full);
    }
    Ok(())
}
