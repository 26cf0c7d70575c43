//! Multi-chain driver with PSRF-gated burn-in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sweep::{gibbs_sweep, SweepSettings, Workspace};
use crate::data::Dataset;
use crate::diagnostics::psrf;
use crate::error::{Error, Result};
use crate::evidence::EvidencePath;
use crate::hyper::Hyperparameters;
use crate::state::{Mode, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Upper bound on burn-in iterations.
    pub max_iterations: usize,
    /// Stored states per chain after burn-in (each `thin` iterations apart).
    pub n_samples: usize,
    pub thin: usize,
    pub block_size: usize,
    pub psrf_threshold: f64,
    pub psrf_fraction: f64,
    pub psrf_check_every: usize,
    pub seed: u64,
    pub mode: Mode,
    pub flat_evidence: EvidencePath,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            max_iterations: 20_000,
            n_samples: 1000,
            thin: 1,
            block_size: 5,
            psrf_threshold: 1.1,
            psrf_fraction: 0.95,
            psrf_check_every: 200,
            seed: 0,
            mode: Mode::Esabre,
            flat_evidence: EvidencePath::Dense,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_chains < 2 {
            return fail(format!("n_chains must be at least 2 for PSRF, got {}", self.n_chains));
        }
        if self.thin == 0 || self.block_size == 0 || self.n_samples == 0 {
            return fail("thin, block_size and n_samples must be at least 1".into());
        }
        if !(self.psrf_threshold > 1.0) {
            return fail(format!("psrf_threshold must exceed 1, got {}", self.psrf_threshold));
        }
        if !(0.0..=1.0).contains(&self.psrf_fraction) {
            return fail(format!("psrf_fraction must lie in [0, 1], got {}", self.psrf_fraction));
        }
        if self.psrf_check_every < 8 {
            return fail("psrf_check_every must be at least 8".into());
        }
        if self.max_iterations < self.psrf_check_every {
            return fail("max_iterations must be at least psrf_check_every".into());
        }
        Ok(())
    }

    pub fn sweep_settings(&self) -> SweepSettings {
        SweepSettings {
            mode: self.mode,
            block_size: self.block_size,
            flat_evidence: self.flat_evidence,
            update_gamma: true,
        }
    }
}

/// Stored post-burn-in states of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStore {
    pub chain_index: usize,
    pub seed: u64,
    /// Number of burn-in iterations discarded.
    pub burn_in: usize,
    pub converged: bool,
    /// Iteration number (counting burn-in) of every stored state.
    pub iterations: Vec<usize>,
    pub states: Vec<ModelState>,
}

impl ChainStore {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSet {
    pub chains: Vec<ChainStore>,
    pub converged: bool,
    pub burn_in: usize,
}

impl ChainSet {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::Numerical(format!(
                "convergence not reached within {} iterations",
                self.burn_in
            )))
        }
    }

    pub fn states(&self) -> impl Iterator<Item = &ModelState> {
        self.chains.iter().flat_map(|c| c.states.iter())
    }

    pub fn n_samples(&self) -> usize {
        self.chains.iter().map(ChainStore::len).sum()
    }

    pub fn gammas(&self) -> Vec<Vec<Vec<bool>>> {
        self.chains
            .iter()
            .map(|c| c.states.iter().map(|s| s.gamma.clone()).collect())
            .collect()
    }

    pub fn inclusion_probabilities(&self) -> Vec<f64> {
        crate::diagnostics::inclusion_probabilities(&self.gammas())
    }

    /// Pooled posterior mean of `pi`.
    pub fn pi_hat(&self) -> f64 {
        let n = self.n_samples().max(1) as f64;
        self.states().map(|s| s.pi).sum::<f64>() / n
    }
}

/// Names of the scalars that gate burn-in, in [`monitored_scalars`] order.
pub fn monitored_names(data: &Dataset) -> Vec<String> {
    let mut v: Vec<String> = ["w0", "mu_w", "pi", "sigma_y2", "sigma_eps2", "sigma_w2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(data.layout.names.iter().map(|n| format!("sigma_b2_{n}")));
    v.extend((0..data.n_coefs()).map(|c| format!("b_{c}")));
    v
}

pub fn monitored_scalars(s: &ModelState) -> Vec<f64> {
    let mut v = vec![s.w0, s.mu_w, s.pi, s.sigma_y2, s.sigma_eps2, s.sigma_w2];
    v.extend_from_slice(&s.sigma_b2);
    v.extend_from_slice(&s.b);
    v
}

/// Random stream of chain `index` under `seed`.
pub fn chain_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

struct Runner {
    state: ModelState,
    rng: ChaCha8Rng,
    /// `trace[m][t]`: scalar `m` at burn-in iteration `t`.
    trace: Vec<Vec<f64>>,
}

/// Per-scalar PSRF over the current burn-in traces.
fn psrf_table(runners: &[Runner]) -> Result<Vec<f64>> {
    let m = runners[0].trace.len();
    (0..m)
        .map(|k| {
            let chains: Vec<&[f64]> = runners.iter().map(|r| r.trace[k].as_slice()).collect();
            psrf(&chains)
        })
        .collect()
}

fn fraction_converged(table: &[f64], threshold: f64) -> f64 {
    if table.is_empty() {
        return 1.0;
    }
    table.iter().filter(|&&r| r <= threshold).count() as f64 / table.len() as f64
}

/// Runs `n_chains` independent chains, ends burn-in at the first check where
/// at least `psrf_fraction` of the monitored scalars have PSRF at or below
/// `psrf_threshold`, then stores `n_samples` thinned states per chain. If
/// `max_iterations` is exhausted the chains are still sampled but flagged
/// non-converged.
pub fn run_chains(data: &Dataset, hyper: &Hyperparameters, config: &SamplerConfig) -> Result<ChainSet> {
    config.validate()?;
    let hyper = hyper.for_factors(data.n_factors())?;
    hyper.validate()?;
    let settings = config.sweep_settings();
    let ws = Workspace::new(data, config.mode);

    let mut runners: Vec<Runner> = (0..config.n_chains)
        .map(|c| {
            let mut rng = chain_rng(config.seed, c);
            let state = ModelState::init(data, &hyper, &mut rng);
            let m = monitored_scalars(&state).len();
            Runner {
                state,
                rng,
                trace: vec![Vec::new(); m],
            }
        })
        .collect();

    let mut iter = 0;
    let mut converged = false;
    while iter < config.max_iterations {
        let steps = config.psrf_check_every.min(config.max_iterations - iter);
        runners.par_iter_mut().try_for_each(|r| -> Result<()> {
            for _ in 0..steps {
                gibbs_sweep(&mut r.state, data, &hyper, &settings, &ws, &mut r.rng)?;
                for (t, v) in r.trace.iter_mut().zip(monitored_scalars(&r.state)) {
                    t.push(v);
                }
            }
            Ok(())
        })?;
        iter += steps;
        if iter >= 8 {
            let table = psrf_table(&runners)?;
            if fraction_converged(&table, config.psrf_threshold) >= config.psrf_fraction {
                converged = true;
                break;
            }
        }
    }
    let burn_in = iter;

    let chains = runners
        .into_par_iter()
        .enumerate()
        .map(|(c, mut r)| -> Result<ChainStore> {
            let mut states = Vec::with_capacity(config.n_samples);
            let mut iterations = Vec::with_capacity(config.n_samples);
            let mut it = burn_in;
            for _ in 0..config.n_samples {
                for _ in 0..config.thin {
                    gibbs_sweep(&mut r.state, data, &hyper, &settings, &ws, &mut r.rng)?;
                    it += 1;
                }
                states.push(r.state.clone());
                iterations.push(it);
            }
            Ok(ChainStore {
                chain_index: c,
                seed: config.seed,
                burn_in,
                converged,
                iterations,
                states,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ChainSet {
        chains,
        converged,
        burn_in,
    })
}

/// Post-hoc PSRF of every monitored scalar over the stored samples.
pub fn posterior_psrf(set: &ChainSet, data: &Dataset) -> Result<Vec<(String, f64)>> {
    let names = monitored_names(data);
    let traces: Vec<Vec<Vec<f64>>> = set
        .chains
        .iter()
        .map(|c| {
            let mut t = vec![Vec::with_capacity(c.len()); names.len()];
            for s in &c.states {
                for (dst, v) in t.iter_mut().zip(monitored_scalars(s)) {
                    dst.push(v);
                }
            }
            t
        })
        .collect();
    names
        .into_iter()
        .enumerate()
        .map(|(k, n)| {
            let chains: Vec<&[f64]> = traces.iter().map(|t| t[k].as_slice()).collect();
            Ok((n, psrf(&chains)?))
        })
        .collect()
}
