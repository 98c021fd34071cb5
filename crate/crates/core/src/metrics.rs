//! Coverage distributions, Lorenz curves, Gini index, Jensen–Shannon
//! distance and the relative-change ratios reported after augmentation.
//!
//! Everything here is pure and reentrant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::KuVector;

/// Tolerance on the sum of a probability vector.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dataset `{0}` has no KU instances")]
    EmptyDataset(String),
    #[error("all values are zero; distribution is degenerate")]
    Degenerate,
    #[error("no values supplied")]
    NoValues,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("{0} must be positive")]
    DivisionDomain(&'static str),
    #[error("invalid distribution `{label}`: {reason}")]
    InvalidDistribution { label: String, reason: String },
}

/// Per-KU proportions of one dataset, indexed by catalog position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageDistribution {
    pub dataset_label: String,
    pub proportions: Vec<f64>,
}

impl CoverageDistribution {
    /// Accepts an already-normalised vector, checking entries and sum.
    pub fn new(label: impl Into<String>, proportions: Vec<f64>) -> Result<Self, MetricsError> {
        let label = label.into();
        let invalid = |reason: String| MetricsError::InvalidDistribution {
            label: label.clone(),
            reason,
        };
        if let Some((i, v)) = proportions
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(invalid(format!("entry {i} = {v} outside [0, 1]")));
        }
        let sum: f64 = proportions.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(invalid(format!("entries sum to {sum}")));
        }
        Ok(Self {
            dataset_label: label,
            proportions,
        })
    }

    /// Normalises non-negative weights (counts, percentages) to sum to 1.
    pub fn from_weights(label: impl Into<String>, weights: &[f64]) -> Result<Self, MetricsError> {
        let label = label.into();
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(MetricsError::InvalidDistribution {
                label,
                reason: format!("weight {i} = {w} is negative or not finite"),
            });
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(MetricsError::EmptyDataset(label));
        }
        Ok(Self {
            dataset_label: label,
            proportions: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.proportions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proportions.is_empty()
    }
}

/// Per-KU totals across a set of vectors.
pub fn totals(vectors: &[KuVector]) -> Result<Vec<u64>, MetricsError> {
    let dim = vectors.first().map_or(0, |v| v.counts.len());
    let mut sums = vec![0u64; dim];
    for v in vectors {
        if v.counts.len() != dim {
            return Err(MetricsError::DimensionMismatch {
                left: dim,
                right: v.counts.len(),
            });
        }
        for (s, c) in sums.iter_mut().zip(&v.counts) {
            *s += c;
        }
    }
    Ok(sums)
}

/// Share of each KU among all KU instances in `vectors`.
pub fn coverage(vectors: &[KuVector], label: &str) -> Result<CoverageDistribution, MetricsError> {
    let sums = totals(vectors)?;
    let grand: u64 = sums.iter().sum();
    if grand == 0 {
        return Err(MetricsError::EmptyDataset(label.to_string()));
    }
    Ok(CoverageDistribution {
        dataset_label: label.to_string(),
        proportions: sums.iter().map(|&s| s as f64 / grand as f64).collect(),
    })
}

/// How the real-world reference distribution is formed from a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// Per-project coverage, per-KU median, renormalised.
    #[default]
    Median,
    /// Coverage of all files pooled together.
    Pooled,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-KU median across projects, renormalised to a probability vector.
pub fn real_world_reference(
    per_project: &[CoverageDistribution],
    label: &str,
) -> Result<CoverageDistribution, MetricsError> {
    let first = per_project.first().ok_or(MetricsError::NoValues)?;
    let dim = first.len();
    for d in per_project {
        if d.len() != dim {
            return Err(MetricsError::DimensionMismatch {
                left: dim,
                right: d.len(),
            });
        }
    }
    let medians: Vec<f64> = (0..dim)
        .map(|k| {
            let mut column: Vec<f64> = per_project.iter().map(|d| d.proportions[k]).collect();
            median(&mut column)
        })
        .collect();
    CoverageDistribution::from_weights(label, &medians)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorenzCurve {
    /// `(population_fraction, value_fraction)` from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub gini: f64,
}

/// Population Gini index, `Σᵢ Σⱼ |xᵢ−xⱼ| / (2 n² x̄)`, via the sorted form.
pub fn gini(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::NoValues);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return Err(MetricsError::Degenerate);
    }
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    Ok((weighted / (n * total)).clamp(0.0, 1.0))
}

/// Lorenz curve of non-negative `values` (e.g. one KU's count per artifact).
pub fn lorenz(values: &[f64]) -> Result<LorenzCurve, MetricsError> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MetricsError::InvalidDistribution {
            label: "lorenz input".into(),
            reason: "values must be finite and non-negative".into(),
        });
    }
    let g = gini(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();
    let mut points = Vec::with_capacity(n + 1);
    points.push((0.0, 0.0));
    let mut cum = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        cum += v;
        let share = if i + 1 == n { 1.0 } else { (cum / total).min(1.0) };
        points.push(((i + 1) as f64 / n as f64, share));
    }
    Ok(LorenzCurve { points, gini: g })
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).log2())
        .sum()
}

/// Jensen–Shannon distance (base 2) between two raw probability vectors.
pub fn js_distance_raw(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let divergence = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(divergence.max(0.0).sqrt().min(1.0))
}

pub fn js_distance(p: &CoverageDistribution, q: &CoverageDistribution) -> Result<f64, MetricsError> {
    js_distance_raw(&p.proportions, &q.proportions)
}

/// `(orig − aug) / orig` — the fractional reduction in distance.
pub fn relative_improvement(jsd_orig: f64, jsd_aug: f64) -> Result<f64, MetricsError> {
    if jsd_orig <= 0.0 {
        return Err(MetricsError::DivisionDomain("original distance"));
    }
    Ok((jsd_orig - jsd_aug) / jsd_orig)
}

/// `(orig − aug) / orig × 100` — percentage decline of a score.
pub fn relative_drop(score_orig: f64, score_aug: f64) -> Result<f64, MetricsError> {
    if score_orig <= 0.0 {
        return Err(MetricsError::DivisionDomain("original score"));
    }
    Ok((score_orig - score_aug) / score_orig * 100.0)
}
