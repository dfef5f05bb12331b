use super::AnnotationError;
use crate::records::PredictionRecord;
use crate::{seed, CategoryId, SampleId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Agree,
    Disagree,
    Corrected { label: CategoryId },
}

/// A seeded uniform draw of confident predictions for expert review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCheckBatch {
    pub batch_id: String,
    pub period: u32,
    pub seed: u64,
    pub population: usize,
    /// Drawn samples, ascending.
    pub sample_ids: Vec<SampleId>,
    pub predictions: BTreeMap<SampleId, CategoryId>,
    pub verdicts: BTreeMap<SampleId, Verdict>,
}

/// Draws `k` of the confident records without replacement.
pub fn spot_check(
    high: &[PredictionRecord],
    k: usize,
    seed_value: u64,
    period: u32,
) -> Result<SpotCheckBatch, AnnotationError> {
    if k > high.len() {
        return Err(AnnotationError::SpotCheckSize {
            k,
            population: high.len(),
        });
    }
    let mut rng = seed::stage_rng(seed_value, "spot-check", u64::from(period));
    let mut picked: Vec<&PredictionRecord> = rand::seq::index::sample(&mut rng, high.len(), k)
        .into_iter()
        .map(|i| &high[i])
        .collect();
    picked.sort_by_key(|r| r.sample_id);
    Ok(SpotCheckBatch {
        batch_id: format!("p{period}-{seed_value:016x}"),
        period,
        seed: seed_value,
        population: high.len(),
        sample_ids: picked.iter().map(|r| r.sample_id).collect(),
        predictions: picked.iter().map(|r| (r.sample_id, r.predicted_category)).collect(),
        verdicts: BTreeMap::new(),
    })
}

impl SpotCheckBatch {
    /// Records a verdict; repeating the same verdict is a no-op.
    pub fn record(&mut self, sample: SampleId, verdict: Verdict) -> Result<(), AnnotationError> {
        if !self.predictions.contains_key(&sample) {
            return Err(AnnotationError::NotInBatch(sample));
        }
        match self.verdicts.get(&sample) {
            Some(v) if *v != verdict => Err(AnnotationError::VerdictConflict { sample }),
            _ => {
                self.verdicts.insert(sample, verdict);
                Ok(())
            }
        }
    }

    pub fn next_pending(&self) -> Option<SampleId> {
        self.sample_ids.iter().copied().find(|s| !self.verdicts.contains_key(s))
    }

    pub fn is_complete(&self) -> bool {
        self.verdicts.len() == self.sample_ids.len()
    }

    pub fn agree_count(&self) -> usize {
        self.verdicts.values().filter(|v| **v == Verdict::Agree).count()
    }

    /// `agree / k` once every verdict is in.
    pub fn agreement_rate(&self) -> Option<f64> {
        (self.is_complete() && !self.sample_ids.is_empty())
            .then(|| self.agree_count() as f64 / self.sample_ids.len() as f64)
    }

    pub fn corrections(&self) -> BTreeMap<SampleId, CategoryId> {
        self.verdicts
            .iter()
            .filter_map(|(&s, v)| match v {
                Verdict::Corrected { label } => Some((s, *label)),
                _ => None,
            })
            .collect()
    }
}

/// Fills every verdict from ground truth: agree when the prediction is right, otherwise
/// a correction to the true category.
pub fn oracle_verdicts(batch: &mut SpotCheckBatch, truth: impl Fn(SampleId) -> CategoryId) {
    for (&s, &pred) in &batch.predictions {
        let t = truth(s);
        let v = if t == pred {
            Verdict::Agree
        } else {
            Verdict::Corrected { label: t }
        };
        batch.verdicts.insert(s, v);
    }
}
