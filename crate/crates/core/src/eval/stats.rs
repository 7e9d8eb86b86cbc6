//! Rank-based comparison of several models over many evaluation cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size with an exact Wilcoxon null distribution.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Ranks (1 = smallest) with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mean rank of each model; `scores[model][cell]`, lower is better.
pub fn mean_ranks(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = scores.len();
    let n = scores.first().map_or(0, Vec::len);
    if k < 2 || n < 1 || scores.iter().any(|s| s.len() != n) {
        return Err(Error::Stats(format!(
            "need at least 2 models scored on the same cells (got {k} models)"
        )));
    }
    let mut sums = vec![0.0; k];
    for c in 0..n {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        for (acc, r) in sums.iter_mut().zip(average_ranks(&col)) {
            *acc += r;
        }
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

/// Friedman chi-square statistic and its p-value with `k - 1` degrees of
/// freedom.
pub fn friedman_test(scores: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n = scores.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(Error::Stats(format!("Friedman test needs at least 2 cells, got {n}")));
    }
    let ranks = mean_ranks(scores)?;
    let k = ranks.len() as f64;
    let sum_sq: f64 = ranks.iter().map(|r| r * r).sum();
    let stat = 12.0 * n as f64 / (k * (k + 1.0)) * (sum_sq - k * (k + 1.0).powi(2) / 4.0);
    let stat = if stat.abs() < 1e-12 { 0.0 } else { stat };
    if stat == 0.0 {
        return Ok((0.0, 1.0));
    }
    let chi = ChiSquared::new(k - 1.0).map_err(|e| Error::Stats(e.to_string()))?;
    Ok((stat, chi.sf(stat)))
}

/// Two-sided Wilcoxon signed-rank p-value for paired samples. Zero
/// differences are dropped; the null distribution is exact up to
/// [`WILCOXON_EXACT_MAX`] pairs and a tie-corrected normal approximation
/// (no continuity correction) beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(1.0);
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let mean = n as f64 * (n as f64 + 1.0) / 4.0;
    if n <= WILCOXON_EXACT_MAX {
        return Ok(exact_p(&ranks, w_plus, mean));
    }
    let mut ties = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        ties += t * t * t - t;
    }
    let var = n as f64 * (n as f64 + 1.0) * (2.0 * n as f64 + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (w_plus - mean).abs() / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((2.0 * normal.sf(z)).min(1.0))
}

/// Counts sign assignments by their positive rank sum, on doubled ranks so
/// that tied (half-integer) ranks stay integral.
fn exact_p(ranks: &[f64], w_plus: f64, mean: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let observed = (2.0 * (w_plus - mean)).abs();
    let extreme: u64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as f64 - 2.0 * mean).abs() >= observed - 1e-9)
        .map(|(_, c)| c)
        .sum();
    (extreme as f64 / 2f64.powi(ranks.len() as i32)).min(1.0)
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (i, &o) in order.iter().enumerate() {
        running = running.max(((m - i) as f64 * p[o]).min(1.0));
        adjusted[o] = running;
    }
    adjusted
}

/// Maximal runs of rank-adjacent models without a rejected pair inside.
///
/// `rejected(i, j)` is queried with model indices; models are ordered by
/// `ranks`. Models that share no run with another come out as singletons.
pub fn holm_cliques(ranks: &[f64], rejected: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..ranks.len()).collect();
    order.sort_by(|&a, &b| ranks[a].total_cmp(&ranks[b]).then(a.cmp(&b)));
    let k = order.len();
    let mut cliques = Vec::new();
    let mut prev_end = None;
    for i in 0..k {
        let mut end = i;
        while end + 1 < k && (i..=end).all(|x| !rejected(order[x], order[end + 1])) {
            end += 1;
        }
        if prev_end.is_none_or(|p| end > p) {
            cliques.push(order[i..=end].to_vec());
        }
        prev_end = Some(end);
    }
    cliques
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub p: f64,
    pub p_holm: f64,
    pub rejected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub models: Vec<String>,
    pub cells: usize,
    pub alpha: f64,
    pub friedman_statistic: f64,
    pub friedman_p: f64,
    pub average_ranks: BTreeMap<String, f64>,
    pub pairwise_p: Vec<PairwiseTest>,
    pub cliques: Vec<Vec<String>>,
}

/// Friedman test, pairwise Wilcoxon tests with Holm correction, and the
/// resulting cliques. `scores[model][cell]`, lower is better.
pub fn compare(models: &[String], scores: &[Vec<f64>], alpha: f64) -> Result<ComparisonResult> {
    if models.len() != scores.len() {
        return Err(Error::Stats("one score row per model required".into()));
    }
    let (friedman_statistic, friedman_p) = friedman_test(scores)?;
    let ranks = mean_ranks(scores)?;
    let k = models.len();
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            pairs.push((i, j, wilcoxon_signed_rank(&scores[i], &scores[j])?));
        }
    }
    let adjusted = holm_adjust(&pairs.iter().map(|p| p.2).collect::<Vec<_>>());
    let mut rejected = vec![vec![false; k]; k];
    let pairwise_p = pairs
        .iter()
        .zip(&adjusted)
        .map(|(&(i, j, p), &ph)| {
            let r = ph <= alpha;
            rejected[i][j] = r;
            rejected[j][i] = r;
            PairwiseTest {
                a: models[i].clone(),
                b: models[j].clone(),
                p,
                p_holm: ph,
                rejected: r,
            }
        })
        .collect();
    let cliques = holm_cliques(&ranks, |i, j| rejected[i][j])
        .into_iter()
        .map(|c| c.into_iter().map(|i| models[i].clone()).collect())
        .collect();
    Ok(ComparisonResult {
        models: models.to_vec(),
        cells: scores[0].len(),
        alpha,
        friedman_statistic,
        friedman_p,
        average_ranks: models.iter().cloned().zip(ranks).collect(),
        pairwise_p,
        cliques,
    })
}
