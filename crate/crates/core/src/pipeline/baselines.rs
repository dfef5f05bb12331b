use super::annotate::NoAnnotation;
use super::evaluate::{evaluate_known, labeled_set};
use super::period::{holdout_split, run_period_n, set_from_labels, PeriodNInputs, PeriodNOutcome};
use super::{AtPeriod, PipelineError};
use crate::annotation::{AnnotationQueue, LogicalClock};
use crate::model::{train_supervised, ClassifierModel, LabeledSet, LossSpec};
use crate::{par, seed, CategoryId, SampleId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

/// Accuracy of a comparison model on the same evaluation set as the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub schema_version: u32,
    pub period: u32,
    pub kind: String,
    pub class_avg_acc: f64,
    pub per_category: BTreeMap<CategoryId, f64>,
    /// Labels the baseline consumed from the new collection, held-out ones included.
    pub n_labels: usize,
    pub epochs: usize,
}

/// Fine-tunes the previous model on the fully labelled new collection with a plain
/// linear head, for the same number of epochs as the loop update. Held-out events of
/// new categories serve as validation, as in the loop.
pub fn transfer_baseline(inp: &PeriodNInputs<'_>) -> Result<(BaselineOutcome, ClassifierModel), PipelineError> {
    let p = inp.period;
    let m = &inp.data.manifest;
    let mut classes = inp.prev_state.known_categories.clone();
    let known: BTreeSet<CategoryId> = classes.iter().copied().collect();
    let novel: BTreeSet<CategoryId> = inp
        .stream
        .iter()
        .map(|&s| m.sample(s).true_category)
        .filter(|c| !known.contains(c))
        .collect();
    classes.extend(novel.iter().copied());

    let mut model = inp.prev_model.clone();
    model.expand_head(classes.len());
    model.oltr_enabled = false;
    // validation mirrors the loop: earlier sets plus held-out events of new categories
    let truth: BTreeMap<SampleId, CategoryId> = inp.stream.iter().map(|&s| (s, m.sample(s).true_category)).collect();
    let (train_labels, held) = holdout_split(
        m,
        &truth,
        &novel,
        inp.cfg.update.holdout_fraction,
        seed::derive(inp.cfg.seeds.split, "holdout", u64::from(p)),
    );
    let mut held_all = inp.prior_holdout.clone();
    held_all.extend(held);
    let train = set_from_labels(m, &train_labels, &classes);
    let val = LabeledSet::concat(
        &labeled_set(m, inp.prior_val, &classes),
        &set_from_labels(m, &held_all, &classes),
    );
    let mut tc = inp
        .cfg
        .update
        .repeat_train_config(seed::derive(inp.cfg.seeds.train, "transfer", u64::from(p)));
    tc.epochs = inp.cfg.update.total_epochs();
    let out = train_supervised(&model, &train, &val, &tc, &LossSpec::cross_entropy()).at(p)?;

    let eval = evaluate_known(
        &out.model,
        &classes,
        m,
        inp.eval_ids,
        inp.prev_state.temperature,
        par::Execution::default(),
    )
    .at(p)?;
    let cats: Vec<CategoryId> = eval.tally.per_category.keys().copied().collect();
    let outcome = BaselineOutcome {
        schema_version: crate::SCHEMA_VERSION,
        period: p,
        kind: "transfer".into(),
        class_avg_acc: eval.class_average(&cats).at(p)?,
        per_category: cats
            .iter()
            .map(|&c| (c, eval.tally.accuracy(c).unwrap_or(0.0)))
            .collect(),
        n_labels: inp.stream.len(),
        epochs: tc.epochs,
    };
    Ok((outcome, out.model))
}

/// The same period with every annotation request withdrawn, so the update sees
/// pseudo-labels only. Runs on a private in-memory queue.
pub fn pseudo_only_update(inp: &PeriodNInputs<'_>) -> Result<PeriodNOutcome, PipelineError> {
    let queue = AnnotationQueue::in_memory(Arc::new(LogicalClock::default())).into_shared();
    let private = PeriodNInputs {
        queue,
        carried_labels: &BTreeMap::new(),
        ..*inp
    };
    let partition = private.partition()?;
    run_period_n(&private, &partition, &mut NoAnnotation)
}
