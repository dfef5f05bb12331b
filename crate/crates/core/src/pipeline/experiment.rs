use super::annotate::{Annotator, OracleDriver};
use super::baselines::{pseudo_only_update, transfer_baseline, BaselineOutcome};
use super::checkpoint::{to_json, write_atomic, Checkpoint, Stage};
use super::partition::Partition;
use super::period::{run_period1, run_period_n, FineTuneSummary, PeriodNInputs, UpdateSummary};
use super::provenance::{file_digest, ProvenanceHeader, ProvenanceLog};
use super::{AtPeriod, PeriodState, PipelineError, ProvenanceRecord};
use crate::annotation::{AnnotationQueue, Clock, Durability, LogicalClock, SharedQueue, SpotCheckBatch, SystemClock};
use crate::config::{AnnotatorConfig, ExperimentConfig};
use crate::datagen::{
    followup_collection, generate_longtail_dataset, make_period_groups, split_by_events, write_manifest,
    DatasetManifest, NoveltyTag, PeriodGroups, SplitAssignment,
};
use crate::metrics::EvaluationReport;
use crate::model::{read_model, write_model, ClassifierModel, EpochRecord};
use crate::{seed, CategoryId, SampleId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// The generated dataset with its split and the sample stream of every period.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// Includes the follow-up collections of periods 3 and later.
    pub manifest: DatasetManifest,
    pub split: SplitAssignment,
    pub groups: PeriodGroups,
    /// New samples per period from 2 on.
    pub streams: BTreeMap<u32, Vec<SampleId>>,
}

impl ExperimentData {
    pub fn stream(&self, period: u32) -> &[SampleId] {
        self.streams.get(&period).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Ground-truth samples every later period is reported on.
    pub fn eval_ids(&self) -> &[SampleId] {
        &self.groups.group2_val
    }

    /// Validation samples of every collection group seen before `period`.
    pub fn prior_val(&self, period: u32) -> Vec<SampleId> {
        let mut v = self.groups.group1_val.clone();
        if period >= 3 {
            v.extend_from_slice(&self.groups.group2_val);
        }
        v
    }

    /// Categories an annotator can name.
    pub fn palette(&self) -> Vec<CategoryId> {
        self.groups.group2_categories.clone()
    }
}

/// Generates the dataset, splits it by trigger event and draws follow-up collections
/// for periods 3 to `periods`.
pub fn prepare_data(cfg: &ExperimentConfig, periods: u32) -> Result<ExperimentData, PipelineError> {
    let base = generate_longtail_dataset(&cfg.datagen)?;
    let split = split_by_events(&base, &cfg.split, cfg.seeds.split)?;
    let groups = make_period_groups(&base, &split);
    let mut streams = BTreeMap::new();
    if periods >= 2 {
        streams.insert(2, groups.group2_train.clone());
    }
    let mut manifest = base;
    for p in 3..=periods {
        let (m, ids) = followup_collection(
            &manifest,
            &groups.group2_categories,
            cfg.followup_share,
            seed::derive(cfg.datagen.seed, "period", u64::from(p)),
        );
        manifest = m;
        streams.insert(p, ids);
    }
    Ok(ExperimentData {
        manifest,
        split,
        groups,
        streams,
    })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub periods: u32,
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub reports: Vec<EvaluationReport>,
    pub baselines: Vec<BaselineOutcome>,
    pub ablations: Vec<EvaluationReport>,
}

/// Human labels consumed in a period, plus what carries into the next one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodLabels {
    pub schema_version: u32,
    pub human_train: BTreeMap<SampleId, CategoryId>,
    /// Every held-out human label so far, this period's included.
    pub holdout: BTreeMap<SampleId, CategoryId>,
    pub corrections: BTreeMap<SampleId, CategoryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainLog {
    schema_version: u32,
    period: u32,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    train_history: Vec<EpochRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    update: Option<UpdateSummary>,
    fine_tune: FineTuneSummary,
}

pub fn period_dir(out: &Path, period: u32) -> PathBuf {
    out.join(format!("period_{period}"))
}

pub const QUEUE_FILE: &str = "queue.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const STATE_FILE: &str = "state.json";

/// Opens the run's journalled annotation queue. Oracle runs use a logical clock so the
/// journal is reproducible; human runs use wall time and synchronous writes.
pub fn open_queue(out: &Path, cfg: &ExperimentConfig) -> Result<SharedQueue, PipelineError> {
    std::fs::create_dir_all(out).map_err(PipelineError::io(out.display().to_string()))?;
    let path = out.join(QUEUE_FILE);
    let queue = match cfg.annotator {
        AnnotatorConfig::Oracle { .. } => {
            let clock: Arc<dyn Clock> = Arc::new(LogicalClock::default());
            AnnotationQueue::open(&path, Durability::Flush, clock).at(0)?
        }
        AnnotatorConfig::Human { lease_secs, .. } => {
            let clock: Arc<dyn Clock> = Arc::new(SystemClock);
            AnnotationQueue::open(&path, Durability::Sync, clock)
                .at(0)?
                .with_lease_ms(lease_secs.saturating_mul(1000))
        }
    };
    Ok(queue.into_shared())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(PipelineError::io(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Decode {
        context: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_atomic(path, &to_json(value))
}

fn digests(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>, PipelineError> {
    names
        .iter()
        .map(|n| Ok((n.to_string(), file_digest(&dir.join(n))?)))
        .collect()
}

fn is_empty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_none()).unwrap_or(true)
}

/// Categories of the first two collection groups: everything an annotator may name.
pub fn annotator_palette(cfg: &ExperimentConfig) -> Vec<CategoryId> {
    (0..cfg.datagen.n_categories)
        .filter(|&r| cfg.datagen.tag_for_rank(r) != NoveltyTag::LeftOutUnknown)
        .map(|r| r as CategoryId)
        .collect()
}

/// Runs periods 1 to `opts.periods` with the oracle annotator from the config.
pub fn run_with_oracle(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let error_rate = match cfg.annotator {
        AnnotatorConfig::Oracle { error_rate } => error_rate,
        AnnotatorConfig::Human { .. } => 0.0,
    };
    let mut cfg = cfg.clone();
    cfg.annotator = AnnotatorConfig::Oracle { error_rate };
    let queue = open_queue(&opts.out, &cfg)?;
    let palette = annotator_palette(&cfg);
    let mut oracle = OracleDriver::new(error_rate, palette, cfg.seeds.annotation)?;
    run_experiment(&cfg, opts, queue, &mut oracle)
}

/// Runs every period, writing artifacts under `opts.out`. With `resume`, completed
/// periods are reloaded from disk and a partially finished period restarts from its
/// last checkpoint; the queue journal keeps labels already given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    queue: SharedQueue,
    annotator: &mut dyn Annotator,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    if opts.periods == 0 {
        return Err(PipelineError::Config(crate::config::ConfigError::Invalid {
            section: "run",
            message: "periods must be at least 1".into(),
        }));
    }
    let out = &opts.out;
    let config_path = out.join("config.json");
    if !opts.resume {
        let only_queue = std::fs::read_dir(out)
            .map(|d| d.flatten().all(|e| e.file_name() == QUEUE_FILE))
            .unwrap_or(true);
        if !is_empty_dir(out) && !(only_queue && !config_path.exists()) {
            return Err(PipelineError::OutputExists(out.display().to_string()));
        }
    }
    std::fs::create_dir_all(out).map_err(PipelineError::io(out.display().to_string()))?;
    if config_path.exists() {
        let found = ExperimentConfig::load(&config_path)?;
        if found.hash() != cfg.hash() {
            return Err(PipelineError::ConfigMismatch {
                dir: out.display().to_string(),
                found: found.hash(),
                expected: cfg.hash(),
            });
        }
    } else {
        write_atomic(&config_path, &cfg.to_json())?;
    }
    let mut log = ProvenanceLog::open(
        &out.join("provenance.jsonl"),
        ProvenanceHeader {
            schema_version: crate::SCHEMA_VERSION,
            config_hash: cfg.hash(),
            seeds: cfg.seeds.clone(),
            datagen_seed: cfg.datagen.seed,
            crate_version: env!("CARGO_PKG_VERSION").into(),
        },
    )?;

    let data = prepare_data(cfg, opts.periods)?;
    let data_dir = out.join("data");
    if !data_dir.join("split.json").exists() {
        write_manifest(&data.manifest, &data_dir)?;
        write_json(&data_dir.join("split.json"), &data.split)?;
        let outputs = digests(&data_dir, &["header.json", "samples.jsonl", "split.json"])?;
        log.append(0, "datagen", BTreeMap::new(), outputs)?;
    }
    let data_digest = file_digest(&data_dir.join("samples.jsonl"))?;

    let mut summary = RunSummary {
        out: out.clone(),
        reports: vec![],
        baselines: vec![],
        ablations: vec![],
    };

    // period 1
    let dir = period_dir(out, 1);
    std::fs::create_dir_all(&dir).map_err(PipelineError::io(dir.display().to_string()))?;
    let mut ck = Checkpoint::load(&dir, 1)?;
    let (mut state, mut model, report) = if ck.has(Stage::Complete) {
        ck.verify(&dir)?;
        load_period(&dir)?
    } else {
        let o = run_period1(&data, cfg)?;
        write_model(&o.model, &dir.join("model.bin")).at(1)?;
        write_model(&o.base_model, &dir.join("base_model.bin")).at(1)?;
        write_json(&dir.join(REPORT_FILE), &o.report)?;
        write_json(&dir.join("calibration.json"), &o.calibration)?;
        write_json(
            &dir.join("train.json"),
            &TrainLog {
                schema_version: crate::SCHEMA_VERSION,
                period: 1,
                train_history: o.train_history,
                update: None,
                fine_tune: o.fine_tune,
            },
        )?;
        let names = [
            "model.bin",
            "base_model.bin",
            REPORT_FILE,
            "calibration.json",
            "train.json",
        ];
        let outputs = digests(&dir, &names)?;
        let inputs = BTreeMap::from([("data/samples.jsonl".to_string(), data_digest.clone())]);
        let mut state = o.state;
        state.provenance.push(ProvenanceRecord {
            operation: "period1".into(),
            inputs: inputs.clone(),
            outputs: outputs.clone(),
        });
        write_json(&dir.join(STATE_FILE), &state)?;
        log.append(
            1,
            "period1",
            inputs,
            digests(&dir, &[STATE_FILE]).map(|mut s| {
                s.extend(outputs);
                s
            })?,
        )?;
        let mut all: Vec<&str> = names.to_vec();
        all.push(STATE_FILE);
        ck.mark(&dir, Stage::Complete, &all)?;
        (state, o.model, o.report)
    };
    summary.reports.push(report);

    let mut labels = PeriodLabels {
        schema_version: crate::SCHEMA_VERSION,
        ..PeriodLabels::default()
    };
    for p in 2..=opts.periods {
        let dir = period_dir(out, p);
        std::fs::create_dir_all(&dir).map_err(PipelineError::io(dir.display().to_string()))?;
        let mut ck = Checkpoint::load(&dir, p)?;
        if ck.has(Stage::Complete) {
            ck.verify(&dir)?;
            let (s, m, r) = load_period(&dir)?;
            labels = read_json(&dir.join("labels.json"))?;
            state = s;
            model = m;
            summary.reports.push(r);
            if dir.join("baseline.json").exists() {
                summary.baselines.push(read_json(&dir.join("baseline.json"))?);
            }
            if dir.join("ablation_report.json").exists() {
                summary.ablations.push(read_json(&dir.join("ablation_report.json"))?);
            }
            continue;
        }
        let prior_val = data.prior_val(p);
        let carried = if cfg.spot_check.merge_corrections {
            labels.corrections.clone()
        } else {
            BTreeMap::new()
        };
        let inp = PeriodNInputs {
            period: p,
            data: &data,
            cfg,
            prev_state: &state,
            prev_model: &model,
            stream: data.stream(p),
            eval_ids: data.eval_ids(),
            prior_val: &prior_val,
            prior_holdout: &labels.holdout,
            carried_labels: &carried,
            queue: queue.clone(),
        };
        let partition: Partition = if ck.has(Stage::Partitioned) {
            ck.verify(&dir)?;
            read_json(&dir.join("partition.json"))?
        } else {
            let part = inp.partition()?;
            write_json(&dir.join("partition.json"), &part)?;
            ck.mark(&dir, Stage::Partitioned, &["partition.json"])?;
            part
        };
        let mut o = run_period_n(&inp, &partition, annotator)?;

        let mut extra: Vec<&str> = vec![];
        if cfg.baselines.transfer {
            let (b, _) = transfer_baseline(&inp)?;
            for row in &mut o.report.per_category {
                row.baseline_accuracy = b.per_category.get(&row.category).copied();
            }
            write_json(&dir.join("baseline.json"), &b)?;
            extra.push("baseline.json");
            summary.baselines.push(b);
        }
        if cfg.baselines.pseudo_only {
            let a = pseudo_only_update(&inp)?;
            write_json(&dir.join("ablation_report.json"), &a.report)?;
            extra.push("ablation_report.json");
            summary.ablations.push(a.report);
        }

        write_model(&o.model, &dir.join("model.bin")).at(p)?;
        write_json(&dir.join(REPORT_FILE), &o.report)?;
        write_json(&dir.join("calibration.json"), &o.calibration)?;
        write_json(&dir.join("spotcheck.json"), &o.spot_check)?;
        let new_labels = PeriodLabels {
            schema_version: crate::SCHEMA_VERSION,
            human_train: o.human_train.clone(),
            holdout: o.holdout.clone(),
            corrections: o.corrections.clone(),
        };
        write_json(&dir.join("labels.json"), &new_labels)?;
        write_json(&dir.join("pseudo_labels.json"), &o.final_pseudo)?;
        write_json(
            &dir.join("update.json"),
            &TrainLog {
                schema_version: crate::SCHEMA_VERSION,
                period: p,
                train_history: vec![],
                update: Some(o.update.clone()),
                fine_tune: o.fine_tune.clone(),
            },
        )?;
        let mut names = vec![
            "partition.json",
            "model.bin",
            REPORT_FILE,
            "calibration.json",
            "spotcheck.json",
            "labels.json",
            "pseudo_labels.json",
            "update.json",
        ];
        names.extend(extra);
        let outputs = digests(&dir, &names)?;
        let prev_model_file = period_dir(out, p - 1).join("model.bin");
        let inputs = BTreeMap::from([
            ("data/samples.jsonl".to_string(), data_digest.clone()),
            (format!("period_{}/model.bin", p - 1), file_digest(&prev_model_file)?),
            (QUEUE_FILE.to_string(), file_digest(&out.join(QUEUE_FILE))?),
        ]);
        o.state.provenance.push(ProvenanceRecord {
            operation: format!("period{p}"),
            inputs: inputs.clone(),
            outputs: outputs.clone(),
        });
        write_json(&dir.join(STATE_FILE), &o.state)?;
        let mut all_out = outputs;
        all_out.insert(STATE_FILE.into(), file_digest(&dir.join(STATE_FILE))?);
        log.append(p, &format!("period{p}"), inputs, all_out)?;
        names.push(STATE_FILE);
        ck.mark(&dir, Stage::Complete, &names)?;

        summary.reports.push(o.report);
        state = o.state;
        model = o.model;
        labels = new_labels;
    }
    Ok(summary)
}

fn load_period(dir: &Path) -> Result<(PeriodState, ClassifierModel, EvaluationReport), PipelineError> {
    let state: PeriodState = read_json(&dir.join(STATE_FILE))?;
    let model = read_model(&dir.join("model.bin")).at(state.period)?;
    let report = read_json(&dir.join(REPORT_FILE))?;
    Ok((state, model, report))
}

/// The spot-check batch written for a period, if any.
pub fn read_spot_check(out: &Path, period: u32) -> Result<Option<SpotCheckBatch>, PipelineError> {
    read_json(&period_dir(out, period).join("spotcheck.json"))
}

/// A period's report as written by [`run_experiment`].
pub fn read_report(out: &Path, period: u32) -> Result<EvaluationReport, PipelineError> {
    read_json(&period_dir(out, period).join(REPORT_FILE))
}
