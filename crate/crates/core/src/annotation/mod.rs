//! Annotation routing: the low-confidence task queue, a simulated oracle annotator,
//! random spot checks of confident predictions, and the 2-D projection served with
//! each task.

mod journal;
mod oracle;
mod projection;
mod queue;
mod spotcheck;

pub use journal::Durability;
pub use oracle::{DrainSummary, OracleAnnotator};
pub use projection::FeatureProjection;
pub use queue::{
    AnnotationQueue, AnnotationTask, Clock, LabelOutcome, LogicalClock, QueueCounts, SharedQueue, SystemClock, TaskId,
    TaskStatus, DEFAULT_LEASE_MS,
};
pub use spotcheck::{oracle_verdicts, spot_check, SpotCheckBatch, Verdict};

use crate::{CategoryId, SampleId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("sample {0} is high-confidence and cannot be queued for annotation")]
    ConfidentRecord(SampleId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {task_id} is already labeled {existing}; refusing label {requested}")]
    Immutable {
        task_id: TaskId,
        existing: CategoryId,
        requested: CategoryId,
    },
    #[error("task {task_id} was already labeled")]
    AlreadyLabeled { task_id: TaskId },
    #[error("task {task_id} is claimed by {holder} until {until_ms}")]
    Claimed {
        task_id: TaskId,
        holder: String,
        until_ms: u64,
    },
    #[error("task {task_id} is expired")]
    Expired { task_id: TaskId },
    #[error("spot check of {k} from a population of {population}")]
    SpotCheckSize { k: usize, population: usize },
    #[error("sample {0} is not part of this spot-check batch")]
    NotInBatch(SampleId),
    #[error("sample {sample} already has a different verdict")]
    VerdictConflict { sample: SampleId },
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("journal io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid annotation config: {0}")]
    Config(String),
}
