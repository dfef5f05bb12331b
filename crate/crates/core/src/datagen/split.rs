use super::{DatagenError, DatasetManifest, NoveltyTag};
use crate::{seed, CategoryId, SampleId};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataGroup {
    Group1,
    Group2,
    UnknownPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub val_fraction: f64,
    /// Validation sample count for categories below `small_category_samples`.
    pub floor: usize,
    pub small_category_samples: usize,
    /// Fraction of a first-group category's events that land in the first period.
    pub period1_share: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            floor: 20,
            small_category_samples: 80,
            period1_share: 0.5,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let err = |m: String| Err(DatagenError::SplitConfig(m));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return err(format!("val_fraction must be in (0,1), got {}", self.val_fraction));
        }
        if self.floor < 2 || !self.floor.is_multiple_of(2) {
            return err(format!("floor must be even and >= 2, got {}", self.floor));
        }
        if !(self.period1_share > 0.0 && self.period1_share < 1.0) {
            return err(format!("period1_share must be in (0,1), got {}", self.period1_share));
        }
        Ok(())
    }
}

/// Per-sample side and collection group, indexed by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub sides: Vec<Side>,
    pub groups: Vec<DataGroup>,
}

impl SplitAssignment {
    pub fn side(&self, id: SampleId) -> Side {
        self.sides[id as usize]
    }

    pub fn group(&self, id: SampleId) -> DataGroup {
        self.groups[id as usize]
    }
}

/// Number of validation events for a category of `n_samples` samples in `n_events` events.
///
/// Small categories get `ceil(floor / 2)` events; the rest get the ceiling of the
/// fraction, at least one.
pub fn validation_events(
    category: CategoryId,
    name: &str,
    n_samples: usize,
    n_events: usize,
    cfg: &SplitConfig,
) -> Result<usize, DatagenError> {
    if n_samples < cfg.floor {
        return Err(DatagenError::SplitFloor {
            category,
            name: name.to_string(),
            samples: n_samples,
            floor: cfg.floor,
        });
    }
    if n_samples < cfg.small_category_samples {
        return Ok(cfg.floor.div_ceil(2).min(n_events));
    }
    let exact = cfg.val_fraction * n_events as f64;
    Ok(((exact - 1e-9).ceil() as usize).clamp(1, n_events))
}

/// Assign whole trigger events to train or validation, and to a collection group.
pub fn split_by_events(
    manifest: &DatasetManifest,
    cfg: &SplitConfig,
    seed_value: u64,
) -> Result<SplitAssignment, DatagenError> {
    cfg.validate()?;
    let n = manifest.samples.len();
    let mut sides = vec![Side::Train; n];
    let mut groups = vec![DataGroup::Group2; n];
    for (cat_idx, events) in manifest.events_by_category().into_iter().enumerate() {
        let cat = &manifest.categories[cat_idx];
        let n_samples = events.len() * 2;
        let n_val = validation_events(cat.id, &cat.name, n_samples, events.len(), cfg)?;
        let mut order: Vec<usize> = (0..events.len()).collect();
        order.shuffle(&mut seed::stage_rng(seed_value, "split", u64::from(cat.id)));
        let (val, train) = order.split_at(n_val);

        let mut assign = |idx: &[usize], side: Side, split_group1: bool| {
            let n_first = if split_group1 {
                first_period_events(idx.len(), cfg.period1_share)
            } else {
                0
            };
            for (pos, &e) in idx.iter().enumerate() {
                let group = match cat.novelty_tag {
                    NoveltyTag::LeftOutUnknown => DataGroup::UnknownPool,
                    NoveltyTag::Group2Only => DataGroup::Group2,
                    NoveltyTag::Group1 if pos < n_first => DataGroup::Group1,
                    NoveltyTag::Group1 => DataGroup::Group2,
                };
                for &s in &events[e].sample_ids {
                    sides[s as usize] = side;
                    groups[s as usize] = group;
                }
            }
        };
        let g1 = cat.novelty_tag == NoveltyTag::Group1;
        assign(val, Side::Validation, g1);
        assign(train, Side::Train, g1);
    }
    Ok(SplitAssignment { sides, groups })
}

fn first_period_events(n: usize, share: f64) -> usize {
    if n < 2 {
        return n;
    }
    ((n as f64 * share).round() as usize).clamp(1, n - 1)
}

/// Sample ids of each collection group, split by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodGroups {
    pub group1_train: Vec<SampleId>,
    pub group1_val: Vec<SampleId>,
    pub group2_train: Vec<SampleId>,
    pub group2_val: Vec<SampleId>,
    pub unknown_train: Vec<SampleId>,
    pub unknown_val: Vec<SampleId>,
    pub group1_categories: Vec<CategoryId>,
    pub group2_categories: Vec<CategoryId>,
    pub unknown_categories: Vec<CategoryId>,
}

pub fn make_period_groups(manifest: &DatasetManifest, split: &SplitAssignment) -> PeriodGroups {
    let mut g = PeriodGroups {
        group1_train: vec![],
        group1_val: vec![],
        group2_train: vec![],
        group2_val: vec![],
        unknown_train: vec![],
        unknown_val: vec![],
        group1_categories: manifest.categories_tagged(NoveltyTag::Group1),
        group2_categories: manifest
            .categories
            .iter()
            .filter(|c| c.novelty_tag != NoveltyTag::LeftOutUnknown)
            .map(|c| c.id)
            .collect(),
        unknown_categories: manifest.categories_tagged(NoveltyTag::LeftOutUnknown),
    };
    for s in &manifest.samples {
        let id = s.sample_id;
        let bucket = match (split.group(id), split.side(id)) {
            (DataGroup::Group1, Side::Train) => &mut g.group1_train,
            (DataGroup::Group1, Side::Validation) => &mut g.group1_val,
            (DataGroup::Group2, Side::Train) => &mut g.group2_train,
            (DataGroup::Group2, Side::Validation) => &mut g.group2_val,
            (DataGroup::UnknownPool, Side::Train) => &mut g.unknown_train,
            (DataGroup::UnknownPool, Side::Validation) => &mut g.unknown_val,
        };
        bucket.push(id);
    }
    g
}
