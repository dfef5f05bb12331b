//! Period orchestration: period-1 training and energy fine-tuning, then for each later
//! period inference, confidence partitioning, annotation, the semi-supervised update,
//! re-fine-tuning and evaluation.

mod annotate;
mod baselines;
mod checkpoint;
mod evaluate;
mod experiment;
mod partition;
mod period;
mod provenance;
mod update;

pub use annotate::{Annotator, NoAnnotation, OracleDriver, PeriodContext};
pub use baselines::{pseudo_only_update, transfer_baseline, BaselineOutcome};
pub use checkpoint::{Checkpoint, Stage};
pub use evaluate::{evaluate_known, labeled_set, EvalContext, ScoredSample};
pub use experiment::{
    annotator_palette, open_queue, period_dir, prepare_data, read_report, read_spot_check, run_experiment,
    run_with_oracle, ExperimentData, PeriodLabels, RunOptions, RunSummary, QUEUE_FILE, REPORT_FILE, STATE_FILE,
};
pub use partition::{infer_and_partition, Partition};
pub use period::{
    run_period1, run_period_n, FineTuneSummary, Period1Outcome, PeriodNInputs, PeriodNOutcome, UpdateSummary,
};
pub use provenance::{file_digest, sha256_hex, ProvenanceEntry, ProvenanceHeader, ProvenanceLog};
pub use update::{run_model_update, RepeatLog, UpdateInputs, UpdateOutcome};

use crate::{CategoryId, SampleId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("period {period}: {source}")]
    Model {
        period: u32,
        #[source]
        source: crate::model::ModelError,
    },
    #[error("period {period}: {source}")]
    Energy {
        period: u32,
        #[source]
        source: crate::energy::EnergyError,
    },
    #[error("period {period}: {source}")]
    Annotation {
        period: u32,
        #[source]
        source: crate::annotation::AnnotationError,
    },
    #[error("period {period}: {source}")]
    Metric {
        period: u32,
        #[source]
        source: crate::metrics::MetricError,
    },
    #[error(transparent)]
    Data(#[from] crate::datagen::DatagenError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("period {period}: novel category {category} has no human-labelled training sample")]
    UnlabeledNovelClass { period: u32, category: CategoryId },
    #[error("period {period}: annotation timed out with {outstanding} tasks outstanding; state checkpointed, rerun with --resume")]
    AnnotationTimeout { period: u32, outstanding: usize },
    #[error("output directory {0} already holds a run; use --resume or a new directory")]
    OutputExists(String),
    #[error("checkpoint in {dir} was written for config {found}, current config is {expected}")]
    ConfigMismatch {
        dir: String,
        found: String,
        expected: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Decode { context: String, message: String },
}

impl PipelineError {
    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Self::Io { context, source }
    }
}

pub(crate) trait AtPeriod<T> {
    fn at(self, period: u32) -> Result<T, PipelineError>;
}

macro_rules! at_period {
    ($err:ty, $variant:ident) => {
        impl<T> AtPeriod<T> for Result<T, $err> {
            fn at(self, period: u32) -> Result<T, PipelineError> {
                self.map_err(|source| PipelineError::$variant { period, source })
            }
        }
    };
}
at_period!(crate::model::ModelError, Model);
at_period!(crate::energy::EnergyError, Energy);
at_period!(crate::annotation::AnnotationError, Annotation);
at_period!(crate::metrics::MetricError, Metric);

/// One recorded operation with digests of what it read and wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub operation: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// What the loop knows after a period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodState {
    pub period: u32,
    /// Head class `i` predicts `known_categories[i]`.
    pub known_categories: Vec<CategoryId>,
    /// Categories first learned in this period.
    pub novel_count: usize,
    pub model_version: u64,
    pub tau: f64,
    pub temperature: f64,
    pub provenance: Vec<ProvenanceRecord>,
}

impl PeriodState {
    pub fn class_of(&self, category: CategoryId) -> Option<usize> {
        self.known_categories.iter().position(|&c| c == category)
    }

    pub fn category_of(&self, class: usize) -> CategoryId {
        self.known_categories[class]
    }
}

/// Pseudo-labels in force for one repeat of the update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: BTreeMap<SampleId, CategoryId>,
    pub source_model_version: u64,
    pub repeat_index: usize,
}
