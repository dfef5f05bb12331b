//! Synthetic long-tailed species datasets.
//!
//! Each category is an isotropic Gaussian cluster in feature space. Samples come in
//! trigger events of two near-duplicates: the second is the first plus jitter at a
//! tenth of the cluster scale. Abundances follow a power-law tail, and categories are
//! tagged by abundance rank into the first collection group, the second-only group and
//! a left-out pool used as the "unknown" stand-in.

mod generate;
mod io;
mod split;

pub use generate::{followup_collection, generate_longtail_dataset};
pub use io::{read_manifest, write_manifest, ManifestFiles};
pub use split::{
    make_period_groups, split_by_events, validation_events, DataGroup, PeriodGroups, Side, SplitAssignment, SplitConfig,
};

use crate::{CategoryId, SampleId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("category {category} ({name}) has {samples} samples, below the validation floor of {floor}")]
    SplitFloor {
        category: CategoryId,
        name: String,
        samples: usize,
        floor: usize,
    },
    #[error("invalid split config: {0}")]
    SplitConfig(String),
    #[error("manifest io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest decode at line {line}: {message}")]
    Decode { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoveltyTag {
    Group1,
    Group2Only,
    LeftOutUnknown,
}

/// How many categories go to each novelty group, assigned in abundance order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoveltyPartition {
    pub group1: usize,
    pub group2_only: usize,
    pub left_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_categories: usize,
    /// Power-law exponent of the abundance curve `max * rank^-exponent`.
    pub tail_exponent: f64,
    pub max_abundance: usize,
    /// Curve values are clamped up to this count.
    pub min_abundance: usize,
    /// Forced per-category sample counts, replacing the curve when present.
    pub abundances: Option<Vec<usize>>,
    pub dim: usize,
    pub cluster_scale: f64,
    /// Standard deviation of the Gaussian prior that cluster means are drawn from.
    pub prior_scale: f64,
    pub partition: NoveltyPartition,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_categories: 55,
            tail_exponent: 1.15,
            max_abundance: 3000,
            min_abundance: 30,
            abundances: None,
            dim: 16,
            cluster_scale: 1.0,
            prior_scale: 1.0,
            partition: NoveltyPartition {
                group1: 26,
                group2_only: 15,
                left_out: 14,
            },
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let err = |m: String| Err(DatagenError::Config(m));
        if self.n_categories < 3 {
            return err(format!("n_categories must be >= 3, got {}", self.n_categories));
        }
        let p = self.partition;
        if p.group1 + p.group2_only + p.left_out != self.n_categories {
            return err(format!(
                "partition sizes {}+{}+{} do not sum to n_categories {}",
                p.group1, p.group2_only, p.left_out, self.n_categories
            ));
        }
        if p.group1 == 0 || p.left_out == 0 {
            return err("partition needs at least one group1 and one left-out category".into());
        }
        if self.dim == 0 {
            return err("dim must be positive".into());
        }
        if !(self.cluster_scale > 0.0 && self.cluster_scale.is_finite()) {
            return err(format!("cluster_scale must be positive, got {}", self.cluster_scale));
        }
        if !(self.prior_scale >= 0.0 && self.prior_scale.is_finite()) {
            return err(format!("prior_scale must be non-negative, got {}", self.prior_scale));
        }
        match &self.abundances {
            Some(a) => {
                if a.len() != self.n_categories {
                    return err(format!(
                        "{} forced abundances for {} categories",
                        a.len(),
                        self.n_categories
                    ));
                }
                if let Some(bad) = a.iter().find(|&&n| n < 2 || n % 2 != 0) {
                    return err(format!(
                        "forced abundance {bad} must be an even count >= 2 (two samples per event)"
                    ));
                }
                if a.windows(2).any(|w| w[1] > w[0]) {
                    return err("forced abundances must be non-increasing".into());
                }
            }
            None => {
                if !(self.tail_exponent >= 0.0 && self.tail_exponent.is_finite()) {
                    return err(format!("tail_exponent must be >= 0, got {}", self.tail_exponent));
                }
                if self.min_abundance < 2 || self.max_abundance < self.min_abundance {
                    return err(format!(
                        "need 2 <= min_abundance <= max_abundance, got {}..{}",
                        self.min_abundance, self.max_abundance
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-category sample counts, non-increasing and even.
    pub fn abundance_profile(&self) -> Vec<usize> {
        if let Some(a) = &self.abundances {
            return a.clone();
        }
        let floor = round_even(self.min_abundance as f64).max(2);
        (0..self.n_categories)
            .map(|rank| {
                let raw = self.max_abundance as f64 * ((rank + 1) as f64).powf(-self.tail_exponent);
                round_even(raw).max(floor)
            })
            .collect()
    }

    pub fn tag_for_rank(&self, rank: usize) -> NoveltyTag {
        let p = self.partition;
        if rank < p.group1 {
            NoveltyTag::Group1
        } else if rank < p.group1 + p.group2_only {
            NoveltyTag::Group2Only
        } else {
            NoveltyTag::LeftOutUnknown
        }
    }
}

fn round_even(x: f64) -> usize {
    ((x / 2.0).round() as usize) * 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: CategoryId,
    pub name: String,
    pub abundance: usize,
    pub novelty_tag: NoveltyTag,
    pub cluster_mean: Vec<f64>,
    pub cluster_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub event_id: u64,
    pub sample_ids: [SampleId; 2],
    pub category_id: CategoryId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: SampleId,
    pub event_id: u64,
    pub features: Vec<f64>,
    /// Ground truth, read only by the oracle annotator and metrics.
    pub true_category: CategoryId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: GenConfig,
    pub categories: Vec<CategorySpec>,
    pub events: Vec<TriggerEvent>,
    /// Indexed by `sample_id`.
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn sample(&self, id: SampleId) -> &Sample {
        &self.samples[id as usize]
    }

    pub fn category(&self, id: CategoryId) -> &CategorySpec {
        &self.categories[id as usize]
    }

    pub fn categories_tagged(&self, tag: NoveltyTag) -> Vec<CategoryId> {
        self.categories
            .iter()
            .filter(|c| c.novelty_tag == tag)
            .map(|c| c.id)
            .collect()
    }

    /// Events grouped per category, in event-id order.
    pub fn events_by_category(&self) -> Vec<Vec<&TriggerEvent>> {
        let mut out = vec![Vec::new(); self.categories.len()];
        for e in &self.events {
            out[e.category_id as usize].push(e);
        }
        out
    }

    /// Features and truths for the given samples, in order.
    pub fn gather(&self, ids: &[SampleId]) -> crate::records::SampleSet {
        crate::records::SampleSet::from_manifest(self, ids)
    }
}
