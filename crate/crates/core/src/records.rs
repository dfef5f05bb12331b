//! Record types shared by the pipeline, annotation and metrics.

use crate::datagen::DatasetManifest;
use crate::{CategoryId, SampleId};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A gathered block of samples: features row-major plus ground truth.
///
/// `truth` exists for the oracle and metrics; training code takes labels separately.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub ids: Vec<SampleId>,
    pub features: Array2<f64>,
    pub truth: Vec<CategoryId>,
}

impl SampleSet {
    pub fn from_manifest(manifest: &DatasetManifest, ids: &[SampleId]) -> Self {
        let dim = manifest.dim();
        let mut features = Array2::zeros((ids.len(), dim));
        let mut truth = Vec::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            let s = manifest.sample(id);
            features
                .row_mut(row)
                .iter_mut()
                .zip(&s.features)
                .for_each(|(dst, src)| *dst = *src);
            truth.push(s.true_category);
        }
        Self {
            ids: ids.to_vec(),
            features,
            truth,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows at the given positions.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            features: self.features.select(ndarray::Axis(0), rows),
            truth: rows.iter().map(|&r| self.truth[r]).collect(),
        }
    }

    pub fn concat(parts: &[&SampleSet]) -> Self {
        let dim = parts.iter().map(|p| p.features.ncols()).max().unwrap_or(0);
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features = if views.is_empty() {
            Array2::zeros((0, dim))
        } else {
            ndarray::concatenate(ndarray::Axis(0), &views).expect("matching feature dims")
        };
        Self {
            ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
            features,
            truth: parts.iter().flat_map(|p| p.truth.iter().copied()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Pseudo,
    Human,
    Oracle,
    None,
}

/// One scored prediction on newly collected data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: SampleId,
    pub predicted_category: CategoryId,
    /// Hex prefix of SHA-256 over the little-endian logits.
    pub logits_digest: String,
    pub energy: f64,
    pub softmax_max: f64,
    pub confident: bool,
    pub label_source: LabelSource,
    pub final_label: Option<CategoryId>,
}

impl PredictionRecord {
    pub fn neg_energy(&self) -> f64 {
        -self.energy
    }
}

pub fn logits_digest(logits: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for x in logits {
        h.update(x.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}
