use super::annotate::{Annotator, PeriodContext};
use super::evaluate::{evaluate_known, labeled_set, EvalContext};
use super::experiment::ExperimentData;
use super::partition::{infer_and_partition, Partition};
use super::update::{run_model_update, RepeatLog, UpdateInputs};
use super::{AtPeriod, PeriodState, PipelineError, PseudoLabelSet};
use crate::annotation::{spot_check, FeatureProjection, SharedQueue, SpotCheckBatch};
use crate::config::ExperimentConfig;
use crate::datagen::DatasetManifest;
use crate::energy::{
    argmax, calibrate_threshold, energy_unchecked, fine_tune_energy, softmax_threshold_at_accuracy, CalibrationReport,
    EnergyConfig, FineTuneData, FineTuneOutcome, KnownScore, ScoreHistogram, SeparationStats,
};
use crate::metrics::{
    high_confidence_stats, label_efficiency, novel_detection_ratio, CategoryReport, EvaluationReport, LabelEfficiency,
    PartitionCounts, SpotCheckSummary,
};
use crate::model::{predict, train_supervised, ClassifierModel, EpochRecord, LabeledSet, LossSpec};
use crate::records::{LabelSource, PredictionRecord};
use crate::{par, seed, CategoryId, SampleId, SCHEMA_VERSION};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

/// Serializable digest of an energy fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneSummary {
    pub m_known: f64,
    pub m_unknown: f64,
    pub best_epoch: Option<usize>,
    pub auroc_before: f64,
    pub auroc_after: f64,
    pub energy_gap_before: f64,
    pub energy_gap_after: f64,
    pub history: Vec<EpochRecord>,
}

impl From<&FineTuneOutcome> for FineTuneSummary {
    fn from(o: &FineTuneOutcome) -> Self {
        Self {
            m_known: o.m_known,
            m_unknown: o.m_unknown,
            best_epoch: o.best_epoch,
            auroc_before: o.auroc_before,
            auroc_after: o.auroc_after,
            energy_gap_before: o.energy_gap_before,
            energy_gap_after: o.energy_gap_after,
            history: o.history.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Period1Outcome {
    pub state: PeriodState,
    pub model: ClassifierModel,
    /// The supervised model before energy fine-tuning.
    pub base_model: ClassifierModel,
    pub report: EvaluationReport,
    pub calibration: CalibrationReport,
    pub train_history: Vec<EpochRecord>,
    pub fine_tune: FineTuneSummary,
}

fn features(manifest: &DatasetManifest, ids: &[SampleId]) -> Array2<f64> {
    manifest.gather(ids).features
}

/// `-E` for every row.
fn neg_energies(model: &ClassifierModel, x: &Array2<f64>, t: f64, period: u32) -> Result<Vec<f64>, PipelineError> {
    let logits = predict(model, x.view(), par::Execution::default()).at(period)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| -energy_unchecked(r.as_slice().expect("standard layout"), t))
        .collect())
}

/// `-E` scores and correctness against the set's own labels.
fn set_scores(
    model: &ClassifierModel,
    set: &LabeledSet,
    t: f64,
    period: u32,
) -> Result<Vec<KnownScore>, PipelineError> {
    let logits = predict(model, set.features.view(), par::Execution::default()).at(period)?;
    Ok(logits
        .rows()
        .into_iter()
        .zip(&set.labels)
        .map(|(r, &label)| {
            let l = r.as_slice().expect("standard layout");
            KnownScore {
                score: -energy_unchecked(l, t),
                correct: argmax(l) == label,
            }
        })
        .collect())
}

/// Threshold from config, or calibrated on validation scores.
fn choose_tau(
    cfg: &EnergyConfig,
    known: &[KnownScore],
    unknown: &[f64],
    period: u32,
) -> Result<(f64, f64), PipelineError> {
    let cal = calibrate_threshold(known, unknown, &cfg.calibration);
    match (cfg.threshold, cal) {
        (Some(tau), Ok(c)) => Ok((tau, c.youden_j)),
        (Some(tau), Err(_)) => Ok((tau, 0.0)),
        (None, Ok(c)) => Ok((c.tau, c.youden_j)),
        (None, Err(e)) => Err(e).at(period),
    }
}

fn calibration_report(
    period: u32,
    tau: f64,
    youden_j: f64,
    ft: &FineTuneOutcome,
    temperature: f64,
    known: &[f64],
    unknown: &[f64],
) -> CalibrationReport {
    CalibrationReport {
        schema_version: SCHEMA_VERSION,
        period,
        tau,
        m_known: ft.m_known,
        m_unknown: ft.m_unknown,
        temperature,
        separation: SeparationStats::compute(known, unknown, youden_j),
        histogram: ScoreHistogram::build(known, unknown),
    }
}

fn novel_records(scores: &[f64], ids: &[SampleId], tau: f64) -> Vec<PredictionRecord> {
    scores
        .iter()
        .zip(ids)
        .map(|(&s, &sample_id)| PredictionRecord {
            sample_id,
            predicted_category: 0,
            logits_digest: String::new(),
            energy: -s,
            softmax_max: 0.0,
            confident: s > tau,
            label_source: LabelSource::None,
            final_label: None,
        })
        .collect()
}

fn per_category(
    manifest: &DatasetManifest,
    eval: &EvalContext,
    categories: &[CategoryId],
    used: &BTreeMap<CategoryId, usize>,
    full: &BTreeMap<CategoryId, usize>,
) -> Vec<CategoryReport> {
    categories
        .iter()
        .map(|&c| {
            let (ok, n) = eval.tally.per_category.get(&c).copied().unwrap_or((0, 0));
            let accuracy = if n > 0 { ok as f64 / n as f64 } else { 0.0 };
            let n_used = used.get(&c).copied().unwrap_or(0);
            let n_full = full.get(&c).copied().unwrap_or(0);
            let eff = label_efficiency(accuracy, n_used.min(n_full), n_full).ok();
            CategoryReport {
                category: c,
                name: manifest.category(c).name.clone(),
                n_val: n as usize,
                accuracy,
                n_human_annotations: n_used,
                n_full_annotations: n_full,
                efficiency: match eff {
                    Some(LabelEfficiency::Finite(v)) => Some(v),
                    _ => None,
                },
                efficiency_unbounded: eff == Some(LabelEfficiency::Unbounded),
                baseline_accuracy: None,
            }
        })
        .collect()
}

fn count_by_truth(manifest: &DatasetManifest, ids: impl IntoIterator<Item = SampleId>) -> BTreeMap<CategoryId, usize> {
    let mut m = BTreeMap::new();
    for id in ids {
        *m.entry(manifest.sample(id).true_category).or_insert(0) += 1;
    }
    m
}

/// Supervised training on the first group, energy fine-tuning with the unknown pool,
/// threshold calibration and the period-1 report.
pub fn run_period1(data: &ExperimentData, cfg: &ExperimentConfig) -> Result<Period1Outcome, PipelineError> {
    const P: u32 = 1;
    let m = &data.manifest;
    let g = &data.groups;
    let classes = g.group1_categories.clone();
    let train = labeled_set(m, &g.group1_train, &classes);
    let val = labeled_set(m, &g.group1_val, &classes);

    let init = ClassifierModel::new(m.dim(), classes.len(), &cfg.model, cfg.seeds.model);
    let mut tc = cfg.period1.train.clone();
    tc.seed = seed::derive(cfg.seeds.train, "period1-train", 0);
    let trained = train_supervised(&init, &train, &val, &tc, &LossSpec::cross_entropy()).at(P)?;
    let base_model = trained.model;

    let mut ecfg = cfg.period1.energy.clone();
    ecfg.fine_tune.seed = seed::derive(cfg.seeds.train, "period1-energy", 0);
    let ft_data = FineTuneData {
        known_train: train,
        unknown_train: features(m, &g.unknown_train),
        known_val: val,
        unknown_val: features(m, &g.unknown_val),
    };
    let ft = fine_tune_energy(&base_model, &ft_data, &ecfg).at(P)?;
    let model = ft.model.clone();
    let t = ecfg.temperature;

    let exec = par::Execution::default();
    let eval = evaluate_known(&model, &classes, m, &g.group1_val, t, exec).at(P)?;
    let unknown_scores = neg_energies(&model, &ft_data.unknown_val, t, P)?;
    let known_scores = eval.energy_scores();
    let (tau, youden_j) = choose_tau(&ecfg, &known_scores, &unknown_scores, P)?;
    let calibration = calibration_report(P, tau, youden_j, &ft, t, &eval.neg_energies(), &unknown_scores);

    // confidence statistics on the first-group validation set
    let val_records: Vec<PredictionRecord> = eval
        .samples
        .iter()
        .map(|s| PredictionRecord {
            sample_id: s.sample_id,
            predicted_category: s.predicted,
            logits_digest: String::new(),
            energy: -s.neg_energy,
            softmax_max: s.softmax_max,
            confident: s.neg_energy > tau,
            label_source: LabelSource::None,
            final_label: None,
        })
        .collect();
    let truths: Vec<CategoryId> = eval.samples.iter().map(|s| s.truth).collect();
    let hc = high_confidence_stats(&val_records, &truths).at(P)?;
    let novel = novel_records(&unknown_scores, &g.unknown_val, tau);
    let novel_ratio = novel_detection_ratio(&novel).at(P)?;

    // conventional softmax thresholding on the model before fine-tuning
    let base_eval = evaluate_known(&base_model, &classes, m, &g.group1_val, t, exec).at(P)?;
    let base_unknown = predict(&base_model, ft_data.unknown_val.view(), exec).at(P)?;
    let base_unknown_softmax: Vec<f64> = base_unknown
        .rows()
        .into_iter()
        .map(|r| crate::energy::softmax_confidence(r.as_slice().expect("standard layout")))
        .collect::<Result<_, _>>()
        .at(P)?;
    let softmax_baseline = match hc.accuracy() {
        Ok(acc) => softmax_threshold_at_accuracy(&base_eval.softmax_scores(), &base_unknown_softmax, acc, 0.01).ok(),
        Err(_) => None,
    };

    let full = count_by_truth(m, g.group1_train.iter().copied());
    let report = EvaluationReport {
        schema_version: SCHEMA_VERSION,
        period: P,
        model_version: model.version,
        n_known_categories: classes.len(),
        class_avg_acc: eval.class_average(&classes).at(P)?,
        class_avg_acc_new_classes: None,
        high_conf_ratio: hc.ratio(),
        high_conf_acc: hc.accuracy().ok(),
        novel_detect_ratio: Some(novel_ratio),
        saved_effort: None,
        tau,
        temperature: t,
        counts: PartitionCounts {
            n_scored: hc.total,
            n_high: hc.confident,
            n_low: hc.total - hc.confident,
            n_high_correct: hc.correct_confident,
            n_novel_scored: novel.len(),
            n_novel_low: novel.iter().filter(|r| !r.confident).count(),
            annotation_requests: 0,
            c_novel: classes.len(),
        },
        softmax_baseline,
        spot_check: None,
        per_category: per_category(m, &eval, &classes, &full, &full),
    };
    let state = PeriodState {
        period: P,
        novel_count: classes.len(),
        known_categories: classes,
        model_version: model.version,
        tau,
        temperature: t,
        provenance: vec![],
    };
    Ok(Period1Outcome {
        state,
        model,
        base_model,
        report,
        calibration,
        train_history: trained.history,
        fine_tune: FineTuneSummary::from(&ft),
    })
}

pub struct PeriodNInputs<'a> {
    pub period: u32,
    pub data: &'a ExperimentData,
    pub cfg: &'a ExperimentConfig,
    pub prev_state: &'a PeriodState,
    pub prev_model: &'a ClassifierModel,
    /// Newly collected samples to score.
    pub stream: &'a [SampleId],
    /// Ground-truth validation samples for the report.
    pub eval_ids: &'a [SampleId],
    /// Earlier validation samples, labelled from ground truth.
    pub prior_val: &'a [SampleId],
    /// Human labels held out for validation in earlier periods.
    pub prior_holdout: &'a BTreeMap<SampleId, CategoryId>,
    /// Expert corrections carried over from the previous period's spot check.
    pub carried_labels: &'a BTreeMap<SampleId, CategoryId>,
    pub queue: SharedQueue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub total_epochs: usize,
    pub best_score: f64,
    pub repeats: Vec<RepeatLog>,
}

#[derive(Debug, Clone)]
pub struct PeriodNOutcome {
    pub state: PeriodState,
    pub model: ClassifierModel,
    pub report: EvaluationReport,
    pub calibration: CalibrationReport,
    /// Human labels used for training.
    pub human_train: BTreeMap<SampleId, CategoryId>,
    /// Human labels held out for validation.
    pub holdout: BTreeMap<SampleId, CategoryId>,
    pub spot_check: Option<SpotCheckBatch>,
    pub corrections: BTreeMap<SampleId, CategoryId>,
    pub update: UpdateSummary,
    pub fine_tune: FineTuneSummary,
    pub final_pseudo: PseudoLabelSet,
}

impl PeriodNInputs<'_> {
    /// Scores the new collection with the previous model and threshold.
    pub fn partition(&self) -> Result<Partition, PipelineError> {
        let s = self.data.manifest.gather(self.stream);
        infer_and_partition(
            self.prev_model,
            &self.prev_state.known_categories,
            &s.ids,
            s.features.view(),
            self.prev_state.tau,
            self.prev_state.temperature,
            par::Execution::default(),
        )
        .at(self.period)
    }

    pub fn spot_check_batch(&self, partition: &Partition) -> Result<Option<SpotCheckBatch>, PipelineError> {
        let k = self.cfg.spot_check.size.min(partition.high.len());
        if k == 0 {
            return Ok(None);
        }
        spot_check(&partition.high, k, self.cfg.seeds.spot_check, self.period)
            .map(Some)
            .at(self.period)
    }
}

/// Split human labels of newly named categories into training and held-out validation
/// by trigger event. At least one event per category stays in training; labels of
/// already known categories all go to training.
pub(crate) fn holdout_split(
    manifest: &DatasetManifest,
    labels: &BTreeMap<SampleId, CategoryId>,
    novel: &BTreeSet<CategoryId>,
    fraction: f64,
    seed_value: u64,
) -> (BTreeMap<SampleId, CategoryId>, BTreeMap<SampleId, CategoryId>) {
    let mut events: BTreeMap<CategoryId, BTreeMap<u64, Vec<SampleId>>> = BTreeMap::new();
    for (&s, &c) in labels {
        events
            .entry(c)
            .or_default()
            .entry(manifest.sample(s).event_id)
            .or_default()
            .push(s);
    }
    let (mut train, mut held) = (BTreeMap::new(), BTreeMap::new());
    for (c, evs) in events {
        let mut ids: Vec<u64> = evs.keys().copied().collect();
        ids.shuffle(&mut seed::stage_rng(seed_value, "holdout", u64::from(c)));
        let n_hold = if novel.contains(&c) {
            ((ids.len() as f64 * fraction).floor() as usize).min(ids.len().saturating_sub(1))
        } else {
            0
        };
        for (i, e) in ids.iter().enumerate() {
            let dst = if i < n_hold { &mut held } else { &mut train };
            for &s in &evs[e] {
                dst.insert(s, c);
            }
        }
    }
    (train, held)
}

pub(crate) fn set_from_labels(
    manifest: &DatasetManifest,
    labels: &BTreeMap<SampleId, CategoryId>,
    classes: &[CategoryId],
) -> LabeledSet {
    let index: BTreeMap<CategoryId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ids: Vec<SampleId> = labels.keys().copied().collect();
    let s = manifest.gather(&ids);
    let l = labels
        .values()
        .map(|c| index.get(c).copied().unwrap_or(classes.len()))
        .collect();
    LabeledSet::new(ids, s.features, l)
}

/// Route the low partition to the annotator, update the model on human and pseudo
/// labels, fine-tune on energy again, recalibrate and evaluate.
pub fn run_period_n(
    inp: &PeriodNInputs<'_>,
    partition: &Partition,
    annotator: &mut dyn Annotator,
) -> Result<PeriodNOutcome, PipelineError> {
    let p = inp.period;
    let m = &inp.data.manifest;
    let cfg = inp.cfg;
    let prev = inp.prev_state;

    // annotation routing
    let tasks = inp.queue.lock().enqueue_low_confidence(p, &partition.low).at(p)?;
    let batch = inp
        .spot_check_batch(partition)?
        .map(|b| Arc::new(parking_lot::Mutex::new(b)));
    let projection = FeatureProjection::fit(&features(m, inp.stream));
    annotator.annotate(&PeriodContext {
        period: p,
        queue: inp.queue.clone(),
        spot_check: batch.clone(),
        manifest: m,
        known: &prev.known_categories,
        projection: &projection,
        tau: prev.tau,
        temperature: prev.temperature,
    })?;
    let mut labels = {
        let q = inp.queue.lock();
        if !q.is_drained(p) {
            let c = q.counts_for_period(p);
            return Err(PipelineError::AnnotationTimeout {
                period: p,
                outstanding: c.pending + c.claimed,
            });
        }
        q.labels_for_period(p)
    };
    let spot = batch.map(|b| b.lock().clone());
    let corrections = spot.as_ref().map(|b| b.corrections()).unwrap_or_default();
    let high_ids: BTreeSet<SampleId> = partition.high.iter().map(|r| r.sample_id).collect();
    for (&s, &c) in inp.carried_labels {
        labels.entry(s).or_insert(c);
    }

    // registry: previous classes, then newly named categories by id
    let known: BTreeSet<CategoryId> = prev.known_categories.iter().copied().collect();
    let novel_classes: BTreeSet<CategoryId> = labels.values().copied().filter(|c| !known.contains(c)).collect();
    let mut classes = prev.known_categories.clone();
    classes.extend(novel_classes.iter().copied());

    let (human_train, holdout) = holdout_split(
        m,
        &labels,
        &novel_classes,
        cfg.update.holdout_fraction,
        seed::derive(cfg.seeds.split, "holdout", u64::from(p)),
    );
    let human_set = set_from_labels(m, &human_train, &classes);
    let mut all_holdout = inp.prior_holdout.clone();
    all_holdout.extend(holdout.iter().map(|(&s, &c)| (s, c)));
    let val = LabeledSet::concat(
        &labeled_set(m, inp.prior_val, &classes),
        &set_from_labels(m, &all_holdout, &classes),
    );

    let pseudo = PseudoLabelSet {
        labels: partition
            .high
            .iter()
            .filter(|r| !labels.contains_key(&r.sample_id))
            .map(|r| (r.sample_id, r.predicted_category))
            .collect(),
        source_model_version: inp.prev_model.version,
        repeat_index: 0,
    };
    let unlabeled: Vec<SampleId> = high_ids.iter().copied().filter(|s| !labels.contains_key(s)).collect();
    let upd = run_model_update(&UpdateInputs {
        period: p,
        model: inp.prev_model,
        classes: &classes,
        human: &human_set,
        pseudo: &pseudo,
        unlabeled: &unlabeled,
        manifest: m,
        val: &val,
        tau: prev.tau,
        temperature: prev.temperature,
        cfg: &cfg.update,
        gate_init_bias: cfg.model.gate_init_bias,
        seed: seed::derive(cfg.seeds.train, "update", u64::from(p)),
    })?;

    // energy fine-tuning on the labelled pool of this period
    let pseudo_rows = set_from_labels(m, &upd.final_pseudo.labels, &classes);
    let known_train = LabeledSet::concat(&human_set, &pseudo_rows);
    let mut ecfg = cfg.period_n_energy.clone();
    ecfg.fine_tune.seed = seed::derive(cfg.seeds.train, "energy", u64::from(p));
    let g = &inp.data.groups;
    let ft_data = FineTuneData {
        known_train,
        unknown_train: features(m, &g.unknown_train),
        known_val: val.clone(),
        unknown_val: features(m, &g.unknown_val),
    };
    let ft = fine_tune_energy(&upd.model, &ft_data, &ecfg).at(p)?;
    let model = ft.model.clone();
    let t = ecfg.temperature;

    let known_scores = set_scores(&model, &val, t, p)?;
    let unknown_scores = neg_energies(&model, &ft_data.unknown_val, t, p)?;
    let (tau, youden_j) = choose_tau(&ecfg, &known_scores, &unknown_scores, p)?;
    let known_neg: Vec<f64> = known_scores.iter().map(|k| k.score).collect();
    let calibration = calibration_report(p, tau, youden_j, &ft, t, &known_neg, &unknown_scores);

    // evaluation on held-out ground truth
    let exec = par::Execution::default();
    let eval = evaluate_known(&model, &classes, m, inp.eval_ids, t, exec).at(p)?;
    let eval_categories: Vec<CategoryId> = eval.tally.per_category.keys().copied().collect();
    let new_categories: Vec<CategoryId> = eval_categories.iter().copied().filter(|c| !known.contains(c)).collect();

    let records: Vec<PredictionRecord> = partition.high.iter().chain(&partition.low).cloned().collect();
    let truths: Vec<CategoryId> = records.iter().map(|r| m.sample(r.sample_id).true_category).collect();
    let hc = high_confidence_stats(&records, &truths).at(p)?;
    let novel = novel_records(&unknown_scores, &g.unknown_val, tau);

    let annotated_by_truth = count_by_truth(
        m,
        labels.keys().copied().filter(|s| !inp.carried_labels.contains_key(s)),
    );
    let full = count_by_truth(m, inp.stream.iter().copied());
    let report = EvaluationReport {
        schema_version: SCHEMA_VERSION,
        period: p,
        model_version: model.version,
        n_known_categories: classes.len(),
        class_avg_acc: eval.class_average(&eval_categories).at(p)?,
        class_avg_acc_new_classes: if new_categories.is_empty() {
            None
        } else {
            Some(eval.class_average(&new_categories).at(p)?)
        },
        high_conf_ratio: hc.ratio(),
        high_conf_acc: hc.accuracy().ok(),
        novel_detect_ratio: novel_detection_ratio(&novel).ok(),
        saved_effort: Some(1.0 - partition.low.len() as f64 / partition.len() as f64),
        tau,
        temperature: t,
        counts: PartitionCounts {
            n_scored: partition.len(),
            n_high: partition.high.len(),
            n_low: partition.low.len(),
            n_high_correct: hc.correct_confident,
            n_novel_scored: novel.len(),
            n_novel_low: novel.iter().filter(|r| !r.confident).count(),
            annotation_requests: tasks.len(),
            c_novel: classes.len() - prev.known_categories.len(),
        },
        softmax_baseline: None,
        spot_check: spot.as_ref().and_then(|b| {
            b.agreement_rate().map(|rate| SpotCheckSummary {
                batch_id: b.batch_id.clone(),
                k: b.sample_ids.len(),
                agree: b.agree_count(),
                agreement_rate: rate,
            })
        }),
        per_category: per_category(m, &eval, &eval_categories, &annotated_by_truth, &full),
    };
    let state = PeriodState {
        period: p,
        novel_count: classes.len() - prev.known_categories.len(),
        known_categories: classes,
        model_version: model.version,
        tau,
        temperature: t,
        provenance: vec![],
    };
    Ok(PeriodNOutcome {
        state,
        model,
        report,
        calibration,
        human_train,
        holdout: all_holdout,
        spot_check: spot,
        corrections,
        update: UpdateSummary {
            total_epochs: upd.total_epochs,
            best_score: upd.best_score,
            repeats: upd.repeats,
        },
        fine_tune: FineTuneSummary::from(&ft),
        final_pseudo: upd.final_pseudo,
    })
}
