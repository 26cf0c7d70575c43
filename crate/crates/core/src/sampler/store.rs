//! Chain persistence: one CSV row per stored state plus a JSON sidecar.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::chains::{ChainSet, ChainStore, SamplerConfig};
use crate::error::{Error, Result};
use crate::state::ModelState;

const SCALARS: [&str; 7] = ["iter", "w0", "mu_w", "pi", "sigma_y2", "sigma_eps2", "sigma_w2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain_index: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub converged: bool,
    pub config: SamplerConfig,
}

/// Column counts `(K, J, ||b||, P)` of a chain table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainDims {
    pub n_factors: usize,
    pub n_vars: usize,
    pub n_coefs: usize,
    pub n_pairs: usize,
}

pub fn chain_header(d: ChainDims) -> String {
    let mut h = SCALARS.join(",");
    let groups = [
        ("sigma_b2_", d.n_factors),
        ("gamma_", d.n_vars),
        ("w_", d.n_vars),
        ("b_", d.n_coefs),
        ("mu_y_", d.n_pairs),
    ];
    for (prefix, n) in groups {
        for i in 0..n {
            write!(h, ",{prefix}{i}").unwrap();
        }
    }
    h
}

fn dims_of(s: &ModelState) -> ChainDims {
    ChainDims {
        n_factors: s.sigma_b2.len(),
        n_vars: s.gamma.len(),
        n_coefs: s.b.len(),
        n_pairs: s.mu_y.len(),
    }
}

/// Serialises a chain. Floats use the shortest representation that parses
/// back to the same value.
pub fn write_chain_csv(chain: &ChainStore) -> String {
    let dims = chain.states.first().map(dims_of).unwrap_or(ChainDims {
        n_factors: 0,
        n_vars: 0,
        n_coefs: 0,
        n_pairs: 0,
    });
    let mut out = chain_header(dims);
    out.push('\n');
    for (it, s) in chain.iterations.iter().zip(&chain.states) {
        write!(
            out,
            "{it},{},{},{},{},{},{}",
            s.w0, s.mu_w, s.pi, s.sigma_y2, s.sigma_eps2, s.sigma_w2
        )
        .unwrap();
        for v in &s.sigma_b2 {
            write!(out, ",{v}").unwrap();
        }
        for &g in &s.gamma {
            write!(out, ",{}", g as u8).unwrap();
        }
        for v in s.w.iter().chain(&s.b).chain(&s.mu_y) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn count_prefix(cols: &[&str], prefix: &str) -> usize {
    cols.iter()
        .filter(|c| {
            c.strip_prefix(prefix)
                .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
        })
        .count()
}

/// Parses a chain table back into `(iterations, states)`.
pub fn parse_chain_csv(text: &str) -> Result<(Vec<usize>, Vec<ModelState>)> {
    const CTX: &str = "chain CSV";
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(CTX, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let dims = ChainDims {
        n_factors: count_prefix(&cols, "sigma_b2_"),
        n_vars: count_prefix(&cols, "gamma_"),
        n_coefs: count_prefix(&cols, "b_"),
        n_pairs: count_prefix(&cols, "mu_y_"),
    };
    if chain_header(dims) != header {
        return Err(Error::parse(CTX, "unexpected column layout"));
    }
    let width = cols.len();
    let mut iters = Vec::new();
    let mut states = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(Error::parse(CTX, format!("row {}: expected {width} fields", ln + 1)));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::parse(CTX, format!("row {}: bad number `{}`", ln + 1, f[i])))
        };
        iters.push(
            f[0].parse::<usize>()
                .map_err(|_| Error::parse(CTX, format!("row {}: bad iter `{}`", ln + 1, f[0])))?,
        );
        let mut at = SCALARS.len();
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v = (at..at + n).map(num).collect::<Result<Vec<_>>>();
            at += n;
            v
        };
        let sigma_b2 = take(dims.n_factors)?;
        let gamma = take(dims.n_vars)?
            .into_iter()
            .map(|g| match g {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::parse(CTX, format!("row {}: gamma must be 0/1", ln + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        let w = take(dims.n_vars)?;
        let b = take(dims.n_coefs)?;
        let mu_y = take(dims.n_pairs)?;
        states.push(ModelState {
            mu_y,
            w0: num(1)?,
            w,
            gamma,
            mu_w: num(2)?,
            sigma_y2: num(4)?,
            sigma_eps2: num(5)?,
            sigma_w2: num(6)?,
            b,
            sigma_b2,
            pi: num(3)?,
        });
    }
    Ok((iters, states))
}

pub fn chain_meta(chain: &ChainStore, config: &SamplerConfig) -> ChainMeta {
    ChainMeta {
        chain_index: chain.chain_index,
        seed: chain.seed,
        burn_in: chain.burn_in,
        converged: chain.converged,
        config: config.clone(),
    }
}

/// Writes `chain_<i>.csv` and `chain_<i>.json` for every chain.
pub fn write_chain_set(set: &ChainSet, config: &SamplerConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in &set.chains {
        let csv = dir.join(format!("chain_{}.csv", c.chain_index));
        std::fs::write(&csv, write_chain_csv(c)).map_err(|e| Error::io(&csv, e))?;
        let meta = dir.join(format!("chain_{}.json", c.chain_index));
        let body = serde_json::to_string_pretty(&chain_meta(c, config))? + "\n";
        std::fs::write(&meta, body).map_err(|e| Error::io(&meta, e))?;
    }
    Ok(())
}

/// Reads every `chain_<i>.csv` with its sidecar from `dir`, ordered by index.
pub fn read_chain_set(dir: &Path) -> Result<(ChainSet, SamplerConfig)> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(i) = name
            .strip_prefix("chain_")
            .and_then(|r| r.strip_suffix(".csv"))
            .and_then(|r| r.parse::<usize>().ok())
        {
            found.push(i);
        }
    }
    found.sort_unstable();
    if found.is_empty() {
        return Err(Error::InvalidData(format!("no chain files in {}", dir.display())));
    }
    let mut chains = Vec::new();
    let mut config = None;
    for i in found {
        let csv = dir.join(format!("chain_{i}.csv"));
        let meta = dir.join(format!("chain_{i}.json"));
        let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
        let mtext = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let m: ChainMeta = serde_json::from_str(&mtext).map_err(|e| Error::parse("chain sidecar JSON", e))?;
        let (iterations, states) = parse_chain_csv(&text)?;
        config.get_or_insert(m.config);
        chains.push(ChainStore {
            chain_index: m.chain_index,
            seed: m.seed,
            burn_in: m.burn_in,
            converged: m.converged,
            iterations,
            states,
        });
    }
    let converged = chains.iter().all(|c| c.converged);
    let burn_in = chains.iter().map(|c| c.burn_in).max().unwrap_or(0);
    Ok((
        ChainSet {
            chains,
            converged,
            burn_in,
        },
        config.expect("at least one chain"),
    ))
}
