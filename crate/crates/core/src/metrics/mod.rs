//! Evaluation metrics and the per-period report.
//!
//! Ratios are stored as fractions and only formatted as percentages when rendered.

mod report;

pub use report::{
    render_csv, render_json, render_text, CategoryReport, EvaluationReport, PartitionCounts, ReportFormat,
    SpotCheckSummary,
};

use crate::records::PredictionRecord;
use crate::{par, CategoryId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("category {0} has no evaluation records")]
    EmptyCategory(CategoryId),
    #[error("no records for {0}")]
    Empty(&'static str),
    #[error("high-confidence accuracy is undefined: no confident records out of {total}")]
    NoConfident { total: usize },
    #[error("label efficiency needs n_full > 0 and n_used <= n_full (got used {used}, full {full})")]
    Annotations { used: usize, full: usize },
    #[error("{truths} truths for {records} records")]
    Length { records: usize, truths: usize },
}

/// Correct and total counts per category. Merging is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tally {
    pub per_category: BTreeMap<CategoryId, (u64, u64)>,
}

impl Tally {
    pub fn add(mut self, truth: CategoryId, predicted: CategoryId) -> Self {
        let e = self.per_category.entry(truth).or_default();
        e.0 += u64::from(truth == predicted);
        e.1 += 1;
        self
    }

    pub fn merge(mut self, other: Tally) -> Self {
        for (c, (ok, n)) in other.per_category {
            let e = self.per_category.entry(c).or_default();
            e.0 += ok;
            e.1 += n;
        }
        self
    }

    pub fn from_pairs(pairs: &[(CategoryId, CategoryId)], exec: par::Execution) -> Self {
        par::fold_merge(exec, pairs, |t: Tally, &(truth, pred)| t.add(truth, pred), Tally::merge)
    }

    pub fn accuracy(&self, category: CategoryId) -> Option<f64> {
        self.per_category
            .get(&category)
            .filter(|(_, n)| *n > 0)
            .map(|&(ok, n)| ok as f64 / n as f64)
    }
}

/// Unweighted mean over `categories` of per-category accuracy, from `(true, predicted)`
/// pairs.
pub fn class_average_accuracy(
    records: &[(CategoryId, CategoryId)],
    categories: &[CategoryId],
) -> Result<f64, MetricError> {
    if categories.is_empty() {
        return Err(MetricError::Empty("class-average accuracy"));
    }
    let tally = Tally::from_pairs(records, par::Execution::default());
    let mut sum = 0.0;
    for &c in categories {
        sum += tally.accuracy(c).ok_or(MetricError::EmptyCategory(c))?;
    }
    Ok(sum / categories.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighConfidenceStats {
    pub total: usize,
    pub confident: usize,
    pub correct_confident: usize,
}

impl HighConfidenceStats {
    pub fn ratio(&self) -> f64 {
        self.confident as f64 / self.total as f64
    }

    pub fn accuracy(&self) -> Result<f64, MetricError> {
        if self.confident == 0 {
            return Err(MetricError::NoConfident { total: self.total });
        }
        Ok(self.correct_confident as f64 / self.confident as f64)
    }
}

/// Confident share and pseudo-label accuracy among confident records, against
/// `truths[i]` for `records[i]`.
pub fn high_confidence_stats(
    records: &[PredictionRecord],
    truths: &[CategoryId],
) -> Result<HighConfidenceStats, MetricError> {
    if records.len() != truths.len() {
        return Err(MetricError::Length {
            records: records.len(),
            truths: truths.len(),
        });
    }
    if records.is_empty() {
        return Err(MetricError::Empty("high-confidence stats"));
    }
    let mut s = HighConfidenceStats {
        total: records.len(),
        confident: 0,
        correct_confident: 0,
    };
    for (r, &t) in records.iter().zip(truths) {
        if r.confident {
            s.confident += 1;
            s.correct_confident += usize::from(r.predicted_category == t);
        }
    }
    Ok(s)
}

/// Fraction of records from never-seen categories that were flagged low-confidence.
pub fn novel_detection_ratio(records: &[PredictionRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty("novel detection"));
    }
    let low = records.iter().filter(|r| !r.confident).count();
    Ok(low as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum LabelEfficiency {
    Finite(f64),
    /// Positive accuracy reached with zero annotations.
    Unbounded,
}

impl LabelEfficiency {
    pub fn value(&self) -> f64 {
        match self {
            Self::Finite(v) => *v,
            Self::Unbounded => f64::INFINITY,
        }
    }
}

/// Accuracy divided by the fraction of full annotations used.
pub fn label_efficiency(accuracy: f64, n_used: usize, n_full: usize) -> Result<LabelEfficiency, MetricError> {
    if n_full == 0 || n_used > n_full {
        return Err(MetricError::Annotations {
            used: n_used,
            full: n_full,
        });
    }
    if accuracy == 0.0 {
        return Ok(LabelEfficiency::Finite(0.0));
    }
    if n_used == 0 {
        return Ok(LabelEfficiency::Unbounded);
    }
    Ok(LabelEfficiency::Finite(accuracy * (n_full as f64 / n_used as f64)))
}
