//! Convergence diagnostics, posterior summaries and selection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gelman-Rubin potential scale reduction factor on the second half of each
/// trace, floored at 1. Returns `+inf` when every chain is constant but the
/// chains disagree.
pub fn psrf(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InvalidData("PSRF needs at least two chains".into()));
    }
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let n = len - len / 2;
    if n < 4 {
        return Err(Error::InvalidData(
            "PSRF needs at least 4 samples in the second half of each chain".into(),
        ));
    }
    let halves: Vec<&[f64]> = chains.iter().map(|c| &c[c.len() - n..]).collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let stats: Vec<(f64, f64)> = halves.iter().map(|h| crate::dist::mean_var(h)).collect();
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m;
    let b = nf / (m - 1.0) * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    if w <= 0.0 {
        let spread = stats.iter().map(|s| (s.0 - grand).abs()).fold(0.0, f64::max);
        return Ok(if spread <= 1e-12 * grand.abs().max(1.0) { 1.0 } else { f64::INFINITY });
    }
    let r = ((nf - 1.0) / nf + b / (nf * w)).sqrt();
    Ok(r.max(1.0))
}

/// Pooled mean of each indicator over every sample of every chain.
pub fn inclusion_probabilities(chains: &[Vec<Vec<bool>>]) -> Vec<f64> {
    let j = chains
        .iter()
        .flat_map(|c| c.first())
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    let mut counts = vec![0usize; j];
    let mut total = 0usize;
    for chain in chains {
        for g in chain {
            total += 1;
            for (c, &on) in counts.iter_mut().zip(g) {
                *c += on as usize;
            }
        }
    }
    counts
        .into_iter()
        .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Mann-Whitney AUROC with half credit for ties.
pub fn auroc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::InvalidData("scores and truth differ in length".into()));
    }
    let pos: Vec<f64> = scores.iter().zip(truth).filter(|(_, &t)| t).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(truth).filter(|(_, &t)| !t).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate("AUROC needs both positive and negative cases".into()));
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// ROC points `(false positive rate, true positive rate)` sweeping the
/// threshold down through the distinct scores.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Vec<(f64, f64)> {
    let np = truth.iter().filter(|&&t| t).count().max(1) as f64;
    let nn = truth.iter().filter(|&&t| !t).count().max(1) as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&s, &y) in scores.iter().zip(truth) {
            if s >= t {
                if y {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        pts.push((fp / nn, tp / np));
    }
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum SelectionRule {
    /// Select `p_j > t`.
    FixedThreshold(f64),
    /// Select the `round(pi_hat * J)` most probable indicators (half to even).
    TopPiHat(f64),
}

pub fn classify(probs: &[f64], rule: SelectionRule) -> Vec<bool> {
    match rule {
        SelectionRule::FixedThreshold(t) => probs.iter().map(|&p| p > t).collect(),
        SelectionRule::TopPiHat(pi_hat) => {
            let count = ((pi_hat * probs.len() as f64).round_ties_even().max(0.0) as usize).min(probs.len());
            let mut order: Vec<usize> = (0..probs.len()).collect();
            // Stable sort keeps lower indices first among ties.
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
            let mut out = vec![false; probs.len()];
            for &j in &order[..count] {
                out[j] = true;
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub selected: Vec<u8>,
    pub rule: Option<SelectionRule>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn confusion_metrics(selected: &[bool], truth: &[bool]) -> Result<MetricReport> {
    if selected.len() != truth.len() {
        return Err(Error::InvalidData("selection and truth differ in length".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &t) in selected.iter().zip(truth) {
        match (s, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fn_);
    Ok(MetricReport {
        auroc: None,
        sensitivity,
        specificity: ratio(tn, tn + fp),
        precision,
        f1: f1_score(precision, sensitivity),
        selected: selected.iter().map(|&s| s as u8).collect(),
        rule: None,
    })
}
