//! Observation tables, pair designs and random-effects layouts.
//!
//! Observations carry a 0-based dense `pair_id` and one 0-based dense group id
//! per random-effect factor. The incidence matrix `M` (observation to pair) and
//! the random-effects design `Z` (observation to coefficient) are never
//! materialised; everything works through these index vectors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-measurement records.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    pub obs_id: Vec<i64>,
    pub y: Vec<f64>,
    pub pair_id: Vec<usize>,
    /// `groups[k][i]` is the group of observation `i` under factor `k`.
    pub groups: Vec<Vec<usize>>,
    pub factor_names: Vec<String>,
}

impl ObservationTable {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_factors(&self) -> usize {
        self.groups.len()
    }
}

/// Fixed-effect design over pairs: `P x (J+1)`, intercept in column 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDesign {
    pub x: DMatrix<f64>,
}

impl PairDesign {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let d = Self { x };
        d.validate()?;
        Ok(d)
    }

    pub fn n_pairs(&self) -> usize {
        self.x.nrows()
    }

    /// Number of candidate regressors `J` (intercept excluded).
    pub fn n_vars(&self) -> usize {
        self.x.ncols().saturating_sub(1)
    }

    /// Entry `(p, j)` of the regressor block, `j` in `0..J`.
    #[inline]
    pub fn var(&self, p: usize, j: usize) -> f64 {
        self.x[(p, j + 1)]
    }

    fn validate(&self) -> Result<()> {
        if self.x.ncols() == 0 {
            return Err(Error::InvalidData("design has no intercept column".into()));
        }
        for p in 0..self.x.nrows() {
            if self.x[(p, 0)] != 1.0 {
                return Err(Error::InvalidData(format!(
                    "design row {p}: intercept column must be 1"
                )));
            }
            for j in 1..self.x.ncols() {
                let v = self.x[(p, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidData(format!(
                        "design row {p}, column x{j}: entry {v} is not binary"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Random-effect factors and their group counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomEffectsLayout {
    pub names: Vec<String>,
    pub sizes: Vec<usize>,
}

impl RandomEffectsLayout {
    pub fn new(names: Vec<String>, sizes: Vec<usize>) -> Result<Self> {
        if names.len() != sizes.len() {
            return Err(Error::InvalidData("layout names and sizes differ in length".into()));
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidData(format!("factor `{}` has no groups", names[k])));
        }
        Ok(Self { names, sizes })
    }

    pub fn empty() -> Self {
        Self {
            names: Vec::new(),
            sizes: Vec::new(),
        }
    }

    pub fn n_factors(&self) -> usize {
        self.sizes.len()
    }

    /// Total number of random-effect coefficients.
    pub fn n_coefs(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Offset of each factor's block inside the flat coefficient vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.sizes
            .iter()
            .map(|&s| {
                let o = acc;
                acc += s;
                o
            })
            .collect()
    }

    /// Factor owning each flat coefficient index.
    pub fn factor_of_coef(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
            .collect()
    }
}

/// Simulation ground truth. Only `gamma` and `re_included` are part of the
/// interchange format; the remaining fields are written when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Truth {
    pub gamma: Vec<u8>,
    pub re_included: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re_variances: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_y: Option<Vec<f64>>,
}

impl Truth {
    pub fn gamma_bool(&self) -> Vec<bool> {
        self.gamma.iter().map(|&g| g == 1).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let t: Truth = serde_json::from_str(text).map_err(|e| Error::parse("truth JSON", e))?;
        if let Some(bad) = t.gamma.iter().find(|&&g| g > 1) {
            return Err(Error::parse("truth JSON", format!("gamma entry {bad} is not 0/1")));
        }
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serialises")
    }
}

/// A validated dataset: observations, pair design, layout and optional truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub obs: ObservationTable,
    pub design: PairDesign,
    pub layout: RandomEffectsLayout,
    pub truth: Option<Truth>,
    pair_obs: Vec<Vec<usize>>,
    coef_index: Vec<Vec<usize>>,
}

impl Dataset {
    /// Builds and validates a dataset; every group of every factor must be used.
    pub fn new(
        obs: ObservationTable,
        design: PairDesign,
        layout: RandomEffectsLayout,
        truth: Option<Truth>,
    ) -> Result<Self> {
        Self::build(obs, design, layout, truth, true)
    }

    /// Like [`Dataset::new`] but tolerates groups with no observations, as
    /// happens for data shards and cross-validation training folds.
    pub fn new_allow_empty_groups(
        obs: ObservationTable,
        design: PairDesign,
        layout: RandomEffectsLayout,
        truth: Option<Truth>,
    ) -> Result<Self> {
        Self::build(obs, design, layout, truth, false)
    }

    fn build(
        obs: ObservationTable,
        design: PairDesign,
        layout: RandomEffectsLayout,
        truth: Option<Truth>,
        dense_groups: bool,
    ) -> Result<Self> {
        let n = obs.len();
        if obs.pair_id.len() != n || obs.obs_id.len() != n {
            return Err(Error::InvalidData("observation columns differ in length".into()));
        }
        if let Some(i) = obs.y.iter().position(|y| !y.is_finite()) {
            return Err(Error::InvalidData(format!("observation {i}: y is not finite")));
        }
        if obs.n_factors() != layout.n_factors() {
            return Err(Error::InvalidData(format!(
                "observations have {} factors, layout has {}",
                obs.n_factors(),
                layout.n_factors()
            )));
        }
        let p = design.n_pairs();
        let mut pair_obs = vec![Vec::new(); p];
        for (i, &pid) in obs.pair_id.iter().enumerate() {
            if pid >= p {
                return Err(Error::InvalidData(format!(
                    "observation {i}: pair_id out of range ({pid} >= {p})"
                )));
            }
            pair_obs[pid].push(i);
        }
        if let Some(empty) = pair_obs.iter().position(|v| v.is_empty()) {
            return Err(Error::InvalidData(format!("pair {empty} has no observations")));
        }
        let coef_index = group_index(&obs, &layout)?;
        if dense_groups {
            for (k, col) in obs.groups.iter().enumerate() {
                let mut seen = vec![false; layout.sizes[k]];
                for &g in col {
                    seen[g] = true;
                }
                if let Some(g) = seen.iter().position(|s| !s) {
                    return Err(Error::InvalidData(format!(
                        "factor `{}`: group {g} has no observations (ids must be dense)",
                        layout.names[k]
                    )));
                }
            }
        }
        if let Some(t) = &truth {
            if t.gamma.len() != design.n_vars() {
                return Err(Error::InvalidData(format!(
                    "truth gamma has length {}, design has {} variables",
                    t.gamma.len(),
                    design.n_vars()
                )));
            }
        }
        Ok(Self {
            obs,
            design,
            layout,
            truth,
            pair_obs,
            coef_index,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.design.n_pairs()
    }

    pub fn n_vars(&self) -> usize {
        self.design.n_vars()
    }

    pub fn n_factors(&self) -> usize {
        self.layout.n_factors()
    }

    pub fn n_coefs(&self) -> usize {
        self.layout.n_coefs()
    }

    /// Observation indices belonging to each pair.
    pub fn pair_obs(&self) -> &[Vec<usize>] {
        &self.pair_obs
    }

    /// Flat random-effect coefficient indices of observation `i`, one per factor.
    #[inline]
    pub fn coefs_of(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.coef_index.iter().map(move |col| col[i])
    }

    /// `coef_index[k][i]`: flat coefficient of observation `i` under factor `k`.
    pub fn coef_index(&self) -> &[Vec<usize>] {
        &self.coef_index
    }

    pub fn incidence_counts(&self) -> Vec<usize> {
        self.pair_obs.iter().map(Vec::len).collect()
    }

    /// `Z b` evaluated at observation `i`.
    #[inline]
    pub fn zb(&self, i: usize, b: &[f64]) -> f64 {
        self.coef_index.iter().map(|col| b[col[i]]).sum()
    }

    /// Keeps only the listed random-effect factors (in the given order).
    pub fn with_factors(&self, keep: &[usize]) -> Result<Self> {
        let obs = ObservationTable {
            obs_id: self.obs.obs_id.clone(),
            y: self.obs.y.clone(),
            pair_id: self.obs.pair_id.clone(),
            groups: keep.iter().map(|&k| self.obs.groups[k].clone()).collect(),
            factor_names: keep.iter().map(|&k| self.obs.factor_names[k].clone()).collect(),
        };
        let layout = RandomEffectsLayout {
            names: keep.iter().map(|&k| self.layout.names[k].clone()).collect(),
            sizes: keep.iter().map(|&k| self.layout.sizes[k]).collect(),
        };
        Self::build(obs, self.design.clone(), layout, self.truth.clone(), false)
    }

    /// Sub-dataset holding the given pairs, re-indexed densely in the given
    /// order. Group ids stay global, so some groups may end up empty.
    pub fn subset_pairs(&self, pairs: &[usize]) -> Result<Self> {
        let mut new_id = vec![usize::MAX; self.n_pairs()];
        for (new, &old) in pairs.iter().enumerate() {
            new_id[old] = new;
        }
        let mut rows: Vec<usize> = pairs
            .iter()
            .flat_map(|&p| self.pair_obs[p].iter().copied())
            .collect();
        rows.sort_unstable();
        let obs = ObservationTable {
            obs_id: rows.iter().map(|&i| self.obs.obs_id[i]).collect(),
            y: rows.iter().map(|&i| self.obs.y[i]).collect(),
            pair_id: rows.iter().map(|&i| new_id[self.obs.pair_id[i]]).collect(),
            groups: self
                .obs
                .groups
                .iter()
                .map(|col| rows.iter().map(|&i| col[i]).collect())
                .collect(),
            factor_names: self.obs.factor_names.clone(),
        };
        let x = DMatrix::from_fn(pairs.len(), self.design.x.ncols(), |r, c| {
            self.design.x[(pairs[r], c)]
        });
        Self::build(obs, PairDesign { x }, self.layout.clone(), self.truth.clone(), false)
    }

    /// Sub-dataset holding the given observations. Pairs left without
    /// observations are dropped and the rest re-indexed in original order.
    pub fn subset_obs(&self, rows: &[usize]) -> Result<Self> {
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let mut keep = vec![false; self.n_pairs()];
        for &i in &rows {
            keep[self.obs.pair_id[i]] = true;
        }
        let pairs: Vec<usize> = (0..self.n_pairs()).filter(|&p| keep[p]).collect();
        let mut new_id = vec![usize::MAX; self.n_pairs()];
        for (new, &old) in pairs.iter().enumerate() {
            new_id[old] = new;
        }
        let obs = ObservationTable {
            obs_id: rows.iter().map(|&i| self.obs.obs_id[i]).collect(),
            y: rows.iter().map(|&i| self.obs.y[i]).collect(),
            pair_id: rows.iter().map(|&i| new_id[self.obs.pair_id[i]]).collect(),
            groups: self
                .obs
                .groups
                .iter()
                .map(|col| rows.iter().map(|&i| col[i]).collect())
                .collect(),
            factor_names: self.obs.factor_names.clone(),
        };
        let x = DMatrix::from_fn(pairs.len(), self.design.x.ncols(), |r, c| {
            self.design.x[(pairs[r], c)]
        });
        Self::build(obs, PairDesign { x }, self.layout.clone(), self.truth.clone(), false)
    }
}

/// Number of observations per pair (the diagonal of `M'M`).
pub fn incidence_counts(obs: &ObservationTable, n_pairs: usize) -> Vec<usize> {
    let mut counts = vec![0; n_pairs];
    for &p in &obs.pair_id {
        counts[p] += 1;
    }
    counts
}

/// Flat coefficient index of every observation under every factor:
/// `out[k][i] = offset_k + group_k(i)`.
pub fn group_index(obs: &ObservationTable, layout: &RandomEffectsLayout) -> Result<Vec<Vec<usize>>> {
    let offsets = layout.offsets();
    obs.groups
        .iter()
        .enumerate()
        .map(|(k, col)| {
            col.iter()
                .enumerate()
                .map(|(i, &g)| {
                    if g >= layout.sizes[k] {
                        Err(Error::InvalidData(format!(
                            "observation {i}: group {g} of factor `{}` out of range (G = {})",
                            layout.names[k], layout.sizes[k]
                        )))
                    } else {
                        Ok(offsets[k] + g)
                    }
                })
                .collect()
        })
        .collect()
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// Parses an observations CSV: `obs_id,y,pair_id,<factor_1>,...,<factor_K>`.
pub fn parse_observations(text: &str) -> Result<ObservationTable> {
    const CTX: &str = "observations CSV";
    let mut rdr = reader(text);
    let header = rdr.headers().map_err(|e| Error::parse(CTX, e))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "obs_id" || cols[1] != "y" || cols[2] != "pair_id" {
        return Err(Error::parse(CTX, "header must start with `obs_id,y,pair_id`"));
    }
    let factor_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    for (f, name) in factor_names.iter().enumerate() {
        if name.is_empty() || name.chars().any(|c| c == ',' || c == '"' || c.is_control()) {
            return Err(Error::parse(CTX, format!("bad factor name `{name}`")));
        }
        if factor_names[..f].contains(name) {
            return Err(Error::parse(CTX, format!("factor `{name}` appears twice")));
        }
    }
    let k = factor_names.len();
    let mut t = ObservationTable {
        obs_id: Vec::new(),
        y: Vec::new(),
        pair_id: Vec::new(),
        groups: vec![Vec::new(); k],
        factor_names,
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(CTX, e))?;
        if rec.len() != k + 3 {
            return Err(Error::parse(CTX, format!("row {}: expected {} fields", line + 1, k + 3)));
        }
        let field_err = |name: &str, v: &str| {
            Error::parse(CTX, format!("row {}: bad {name} `{v}`", line + 1))
        };
        t.obs_id
            .push(rec[0].parse().map_err(|_| field_err("obs_id", &rec[0]))?);
        let y: f64 = rec[1].parse().map_err(|_| field_err("y", &rec[1]))?;
        if !y.is_finite() {
            return Err(field_err("y", &rec[1]));
        }
        t.y.push(y);
        t.pair_id
            .push(rec[2].parse().map_err(|_| field_err("pair_id", &rec[2]))?);
        for (f, col) in t.groups.iter_mut().enumerate() {
            let v = &rec[3 + f];
            col.push(v.parse().map_err(|_| field_err("group id", v))?);
        }
    }
    Ok(t)
}

/// Parses a pair-design CSV: `pair_id,x0,x1,...,xJ`. Rows may come in any
/// order but must cover `0..P` exactly once.
pub fn parse_design(text: &str) -> Result<PairDesign> {
    const CTX: &str = "pair-design CSV";
    let mut rdr = reader(text);
    let header = rdr.headers().map_err(|e| Error::parse(CTX, e))?.clone();
    if header.len() < 2 || &header[0] != "pair_id" || &header[1] != "x0" {
        return Err(Error::parse(CTX, "header must start with `pair_id,x0`"));
    }
    for (j, name) in header.iter().enumerate().skip(1) {
        if name != format!("x{}", j - 1) {
            return Err(Error::parse(CTX, format!("unexpected column `{name}`")));
        }
    }
    let width = header.len() - 1;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(CTX, e))?;
        if rec.len() != width + 1 {
            return Err(Error::parse(CTX, format!("row {}: expected {} fields", line + 1, width + 1)));
        }
        let pid: usize = rec[0]
            .parse()
            .map_err(|_| Error::parse(CTX, format!("row {}: bad pair_id `{}`", line + 1, &rec[0])))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::parse(CTX, format!("row {}: bad entry `{v}`", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((pid, vals));
    }
    let p = rows.len();
    let mut x = DMatrix::zeros(p, width);
    let mut seen = vec![false; p];
    for (pid, vals) in rows {
        if pid >= p {
            return Err(Error::InvalidData(format!("design pair_id {pid} out of range (P = {p})")));
        }
        if std::mem::replace(&mut seen[pid], true) {
            return Err(Error::InvalidData(format!("design pair_id {pid} appears twice")));
        }
        for (j, v) in vals.into_iter().enumerate() {
            x[(pid, j)] = v;
        }
    }
    PairDesign::new(x)
}

pub fn write_observations(obs: &ObservationTable) -> String {
    let mut s = String::from("obs_id,y,pair_id");
    for name in &obs.factor_names {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for i in 0..obs.len() {
        write!(s, "{},{},{}", obs.obs_id[i], obs.y[i], obs.pair_id[i]).unwrap();
        for col in &obs.groups {
            write!(s, ",{}", col[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_design(design: &PairDesign) -> String {
    let mut s = String::from("pair_id");
    for j in 0..design.x.ncols() {
        write!(s, ",x{j}").unwrap();
    }
    s.push('\n');
    for p in 0..design.n_pairs() {
        write!(s, "{p}").unwrap();
        for j in 0..design.x.ncols() {
            write!(s, ",{}", design.x[(p, j)]).unwrap();
        }
        s.push('\n');
    }
    s
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads and validates a dataset. Group counts come from `layout` when given,
/// otherwise they are inferred as `max id + 1` per factor.
pub fn load_dataset(
    obs_path: &Path,
    design_path: &Path,
    layout: Option<&RandomEffectsLayout>,
    truth_path: Option<&Path>,
) -> Result<Dataset> {
    let obs = parse_observations(&read_file(obs_path)?)?;
    let design = parse_design(&read_file(design_path)?)?;
    let layout = match layout {
        Some(l) => {
            if l.names != obs.factor_names {
                return Err(Error::InvalidData(format!(
                    "layout factors {:?} do not match observation header {:?}",
                    l.names, obs.factor_names
                )));
            }
            l.clone()
        }
        None => infer_layout(&obs)?,
    };
    let truth = truth_path.map(|p| read_file(p).and_then(|t| Truth::parse(&t))).transpose()?;
    Dataset::new(obs, design, layout, truth)
}

pub fn infer_layout(obs: &ObservationTable) -> Result<RandomEffectsLayout> {
    let sizes = obs
        .groups
        .iter()
        .map(|col| col.iter().max().map_or(0, |m| m + 1))
        .collect();
    RandomEffectsLayout::new(obs.factor_names.clone(), sizes)
}

/// Writes `observations.csv`, `design.csv` and (when present) `truth.json`.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    let put = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    put("observations.csv", write_observations(&data.obs))?;
    put("design.csv", write_design(&data.design))?;
    if let Some(t) = &data.truth {
        put("truth.json", t.to_json() + "\n")?;
    }
    Ok(())
}
