//! One-way ANOVA ranking of feature columns.

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::featurex::{FeatureError, FeatureMatrix};
use crate::stage::{StageLabel, NUM_STAGES};

/// Share of columns kept.
pub const KEEP_FRACTION: f64 = 0.9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SelectError {
    #[error("need at least two non-empty groups, found {0}")]
    DegenerateGrouping(usize),
    #[error("{n} samples do not exceed {groups} groups")]
    TooFewSamples { n: usize, groups: usize },
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("selection mask has {mask} columns, matrix has {matrix}")]
    WidthMismatch { mask: usize, matrix: usize },
}

impl From<SelectError> for FeatureError {
    fn from(e: SelectError) -> Self {
        FeatureError::Malformed(e.to_string())
    }
}

/// One-way ANOVA F statistic of `column` grouped by stage. Zero within-group
/// spread gives `+inf` when the group means differ and 0 when they do not.
pub fn anova_f(column: ArrayView1<f64>, labels: &[StageLabel]) -> Result<f64, SelectError> {
    let mut n = [0usize; NUM_STAGES];
    let mut sum = [0.0f64; NUM_STAGES];
    let mut lo = [f64::INFINITY; NUM_STAGES];
    let mut hi = [f64::NEG_INFINITY; NUM_STAGES];
    for (&x, s) in column.iter().zip(labels) {
        let g = s.index();
        n[g] += 1;
        sum[g] += x;
        lo[g] = lo[g].min(x);
        hi[g] = hi[g].max(x);
    }
    let groups = n.iter().filter(|&&c| c > 0).count();
    if groups < 2 {
        return Err(SelectError::DegenerateGrouping(groups));
    }
    let total = labels.len();
    if total <= groups {
        return Err(SelectError::TooFewSamples { n: total, groups });
    }
    let mut mean = [0.0f64; NUM_STAGES];
    for g in 0..NUM_STAGES {
        if n[g] > 0 {
            // a constant group has its value as mean exactly
            mean[g] = if lo[g] == hi[g] { lo[g] } else { sum[g] / n[g] as f64 };
        }
    }
    let grand = sum.iter().sum::<f64>() / total as f64;
    let ssb: f64 = (0..NUM_STAGES).map(|g| n[g] as f64 * (mean[g] - grand).powi(2)).sum();
    let ssw: f64 = column.iter().zip(labels).map(|(&x, s)| (x - mean[s.index()]).powi(2)).sum();
    let between = ssb / (groups - 1) as f64;
    let within = ssw / (total - groups) as f64;
    if within == 0.0 {
        let present: Vec<f64> = (0..NUM_STAGES).filter(|&g| n[g] > 0).map(|g| mean[g]).collect();
        let spread = present.iter().any(|&m| m != present[0]);
        return Ok(if spread { f64::INFINITY } else { 0.0 });
    }
    Ok(between / within)
}

/// Kept columns of F′, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub kept_indices: Vec<usize>,
    pub f_stats: Vec<f64>,
    pub m_prime: usize,
    pub m: usize,
}

/// `floor(0.9 * m_prime)`.
pub fn kept_count(m_prime: usize) -> usize {
    (m_prime * 9) / 10
}

impl SelectionMask {
    /// Rank by descending F (ties: lower column first) and keep the top share.
    pub fn from_scores(f_stats: Vec<f64>) -> Self {
        let m_prime = f_stats.len();
        let m = kept_count(m_prime);
        let mut order: Vec<usize> = (0..m_prime).collect();
        order.sort_by(|&a, &b| f_stats[b].total_cmp(&f_stats[a]).then(a.cmp(&b)));
        order.truncate(m);
        SelectionMask { kept_indices: order, f_stats, m_prime, m }
    }

    pub fn apply(&self, features: &FeatureMatrix) -> Result<FeatureMatrix, SelectError> {
        if features.num_features() != self.m_prime {
            return Err(SelectError::WidthMismatch { mask: self.m_prime, matrix: features.num_features() });
        }
        Ok(features.select_columns(&self.kept_indices))
    }
}

/// Score every column on `labels` and keep the top 90%. Columns that cannot
/// be scored get F = 0.
pub fn select_top(features: &FeatureMatrix, labels: &[StageLabel]) -> Result<SelectionMask, SelectError> {
    if features.num_epochs() != labels.len() {
        return Err(SelectError::LengthMismatch { features: features.num_epochs(), labels: labels.len() });
    }
    let values = features.values();
    let f_stats: Vec<f64> = (0..features.num_features())
        .into_par_iter()
        .map(|j| anova_f(values.column(j), labels).unwrap_or(0.0))
        .collect();
    Ok(SelectionMask::from_scores(f_stats))
}
