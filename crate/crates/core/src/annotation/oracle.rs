use super::queue::{AnnotationQueue, TaskId, TaskStatus};
use super::AnnotationError;
use crate::{seed, CategoryId, SampleId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A simulated annotator with ground-truth access. With probability `error_rate` the
/// label is replaced by a uniformly drawn different category from the palette.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    pub id: String,
    pub error_rate: f64,
    palette: Vec<CategoryId>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DrainSummary {
    pub labeled: usize,
    pub corrupted: usize,
}

impl OracleAnnotator {
    pub fn new(error_rate: f64, palette: Vec<CategoryId>, seed_value: u64) -> Result<Self, AnnotationError> {
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(AnnotationError::Config(format!(
                "error rate must be in [0,1], got {error_rate}"
            )));
        }
        if error_rate > 0.0 && palette.len() < 2 {
            return Err(AnnotationError::Config(
                "label corruption needs at least two palette categories".into(),
            ));
        }
        Ok(Self {
            id: "oracle".into(),
            error_rate,
            palette,
            rng: seed::stage_rng(seed_value, "oracle", 0),
        })
    }

    /// The label this annotator gives for a sample of category `truth`, and whether it
    /// was corrupted.
    pub fn label_for(&mut self, truth: CategoryId) -> (CategoryId, bool) {
        if self.error_rate == 0.0 || self.rng.random::<f64>() >= self.error_rate {
            return (truth, false);
        }
        let others: Vec<CategoryId> = self.palette.iter().copied().filter(|&c| c != truth).collect();
        (others[self.rng.random_range(0..others.len())], true)
    }

    /// Labels one pending or claimed task. Labeled tasks are refused.
    pub fn annotate(
        &mut self,
        queue: &mut AnnotationQueue,
        task_id: TaskId,
        truth: CategoryId,
    ) -> Result<(CategoryId, bool), AnnotationError> {
        let task = queue.task(task_id)?;
        if matches!(task.status, TaskStatus::Labeled | TaskStatus::Expired) {
            return Err(AnnotationError::AlreadyLabeled { task_id });
        }
        let (label, corrupted) = self.label_for(truth);
        queue.apply_label(task_id, label, None)?;
        Ok((label, corrupted))
    }

    /// Labels every outstanding task of `period` in task order.
    pub fn drain(
        &mut self,
        queue: &mut AnnotationQueue,
        period: u32,
        truth: impl Fn(SampleId) -> CategoryId,
    ) -> Result<DrainSummary, AnnotationError> {
        let open: Vec<(TaskId, SampleId)> = queue
            .tasks()
            .iter()
            .filter(|t| t.period == period && matches!(t.status, TaskStatus::Pending | TaskStatus::Claimed))
            .map(|t| (t.task_id, t.sample_id))
            .collect();
        let mut s = DrainSummary::default();
        for (task_id, sample) in open {
            let (_, corrupted) = self.annotate(queue, task_id, truth(sample))?;
            s.labeled += 1;
            s.corrupted += usize::from(corrupted);
        }
        Ok(s)
    }
}
