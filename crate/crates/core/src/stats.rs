//! Nonparametric tests with Bonferroni adjustment and Cliff's delta.
//!
//! Both rank tests are two-sided. Exact null distributions are used for
//! small samples (combined `n ≤ 25` without ties for the rank-sum test,
//! `n ≤ 25` effective pairs for the signed-rank test, ties allowed);
//! larger samples fall back to the tie-corrected normal approximation
//! with a 0.5 continuity correction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Largest sample size handled by the exact null distributions.
pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("group `{0}` is empty")]
    EmptyGroup(&'static str),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all paired differences are zero")]
    DegeneratePairs,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("n_comparisons must be at least 1")]
    NoComparisons,
    #[error("non-finite value in sample")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestName {
    RankSum,
    SignedRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
    /// No informative pairs; p fixed at 1.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub test_name: TestName,
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub alpha_adjusted: f64,
    pub significant: bool,
    pub n_comparisons: usize,
    pub method: PMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl StatTestResult {
    fn assemble(
        test_name: TestName,
        statistic: f64,
        p_value: f64,
        alpha: f64,
        n_comparisons: usize,
        method: PMethod,
    ) -> Result<Self, StatsError> {
        let alpha_adjusted = bonferroni(alpha, n_comparisons)?;
        let p_value = p_value.clamp(0.0, 1.0);
        Ok(Self {
            test_name,
            statistic,
            p_value,
            alpha,
            alpha_adjusted,
            significant: p_value < alpha_adjusted,
            n_comparisons,
            method,
            warning: None,
        })
    }
}

/// Bonferroni-adjusted per-comparison threshold.
pub fn bonferroni(alpha: f64, n_comparisons: usize) -> Result<f64, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha(alpha));
    }
    if n_comparisons == 0 {
        return Err(StatsError::NoComparisons);
    }
    Ok(alpha / n_comparisons as f64)
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Sizes of tie groups among `values`.
fn tie_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        out.push(j - i);
        i = j;
    }
    out
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn two_sided_normal(deviation: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    let z = (deviation.abs() - 0.5).max(0.0) / sigma;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

/// Number of `size`-subsets of ranks `1..=total` for each attainable rank
/// sum, indexed by sum.
fn subset_sum_counts(total: usize, size: usize) -> Vec<Vec<f64>> {
    let max_sum = total * (total + 1) / 2;
    // table[j][s]: subsets of size j with sum s among ranks seen so far.
    let mut table = vec![vec![0.0f64; max_sum + 1]; size + 1];
    table[0][0] = 1.0;
    for rank in 1..=total {
        for j in (1..=size.min(rank)).rev() {
            for s in (rank..=max_sum).rev() {
                table[j][s] += table[j - 1][s - rank];
            }
        }
    }
    table
}

/// Mann–Whitney U (two-sided). The reported statistic is U for group `a`.
pub fn rank_sum_test(a: &[f64], b: &[f64], alpha: f64, n_comparisons: usize) -> Result<StatTestResult, StatsError> {
    if a.is_empty() {
        return Err(StatsError::EmptyGroup("a"));
    }
    if b.is_empty() {
        return Err(StatsError::EmptyGroup("b"));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let ties = tie_sizes(&pooled);
    let has_ties = ties.iter().any(|&t| t > 1);

    let (p, method) = if n <= EXACT_LIMIT && !has_ties {
        let table = subset_sum_counts(n, na);
        let dist = &table[na];
        let total: f64 = dist.iter().sum();
        let observed = rank_sum_a.round() as usize;
        let lower: f64 = dist[..=observed].iter().sum();
        let upper: f64 = dist[observed..].iter().sum();
        ((2.0 * lower.min(upper) / total).min(1.0), PMethod::Exact)
    } else {
        let mean = (na * nb) as f64 / 2.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1)).max(1) as f64;
        let var = (na * nb) as f64 / 12.0 * ((n + 1) as f64 - tie_term);
        (two_sided_normal(u - mean, var.max(0.0).sqrt()), PMethod::Normal)
    };
    StatTestResult::assemble(TestName::RankSum, u, p, alpha, n_comparisons, method)
}

/// What the signed-rank test does when every paired difference is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroDifferencePolicy {
    /// Report p = 1 with a warning attached to the result.
    #[default]
    PValueOne,
    /// Return [`StatsError::DegeneratePairs`].
    Error,
}

/// Wilcoxon signed-rank test with the default zero-difference policy.
pub fn signed_rank_test(
    paired_a: &[f64],
    paired_b: &[f64],
    alpha: f64,
    n_comparisons: usize,
) -> Result<StatTestResult, StatsError> {
    signed_rank_test_with(
        paired_a,
        paired_b,
        alpha,
        n_comparisons,
        ZeroDifferencePolicy::default(),
    )
}

/// Wilcoxon signed-rank test (two-sided). Zero differences are dropped;
/// the reported statistic is `min(W+, W−)`.
pub fn signed_rank_test_with(
    paired_a: &[f64],
    paired_b: &[f64],
    alpha: f64,
    n_comparisons: usize,
    zero_policy: ZeroDifferencePolicy,
) -> Result<StatTestResult, StatsError> {
    if paired_a.len() != paired_b.len() {
        return Err(StatsError::LengthMismatch(paired_a.len(), paired_b.len()));
    }
    if paired_a.is_empty() {
        return Err(StatsError::EmptyGroup("pairs"));
    }
    check_finite(paired_a)?;
    check_finite(paired_b)?;
    let diffs: Vec<f64> = paired_a
        .iter()
        .zip(paired_b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return match zero_policy {
            ZeroDifferencePolicy::Error => Err(StatsError::DegeneratePairs),
            ZeroDifferencePolicy::PValueOne => {
                log::warn!("signed-rank test: all paired differences are zero; reporting p = 1");
                let mut r = StatTestResult::assemble(
                    TestName::SignedRank,
                    0.0,
                    1.0,
                    alpha,
                    n_comparisons,
                    PMethod::Degenerate,
                )?;
                r.warning = Some("all paired differences are zero".into());
                Ok(r)
            }
        };
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let (p, method) = if n <= EXACT_LIMIT {
        // Midranks are multiples of 1/2, so doubled ranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut dist = vec![0.0f64; max_sum + 1];
        dist[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max_sum).rev() {
                dist[s] += dist[s - r];
            }
        }
        let observed = (w_plus * 2.0).round() as usize;
        let all: f64 = dist.iter().sum();
        let lower: f64 = dist[..=observed].iter().sum();
        let upper: f64 = dist[observed..].iter().sum();
        ((2.0 * lower.min(upper) / all).min(1.0), PMethod::Exact)
    } else {
        let mean = total / 2.0;
        let tie_term: f64 = tie_sizes(&abs).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term;
        (two_sided_normal(w_plus - mean, var.max(0.0).sqrt()), PMethod::Normal)
    };
    StatTestResult::assemble(TestName::SignedRank, statistic, p, alpha, n_comparisons, method)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Magnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Magnitude {
    /// Romano et al. bands on `|δ|`.
    pub fn from_delta(delta: f64) -> Self {
        let d = delta.abs();
        if d <= 0.147 {
            Self::Negligible
        } else if d <= 0.33 {
            Self::Small
        } else if d <= 0.474 {
            Self::Medium
        } else {
            Self::Large
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub delta: f64,
    pub magnitude: Magnitude,
}

/// Cliff's delta: `(#{a>b} − #{a<b}) / (|a|·|b|)`.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<EffectSize, StatsError> {
    if a.is_empty() {
        return Err(StatsError::EmptyGroup("a"));
    }
    if b.is_empty() {
        return Err(StatsError::EmptyGroup("b"));
    }
    check_finite(a)?;
    check_finite(b)?;
    let mut dominance: i64 = 0;
    for x in a {
        for y in b {
            dominance += match x.partial_cmp(y).expect("finite") {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => -1,
                std::cmp::Ordering::Equal => 0,
            };
        }
    }
    let delta = dominance as f64 / (a.len() * b.len()) as f64;
    Ok(EffectSize {
        delta,
        magnitude: Magnitude::from_delta(delta),
    })
}
