use super::{AtPeriod, PipelineError, PseudoLabelSet};
use crate::config::UpdateConfig;
use crate::datagen::DatasetManifest;
use crate::energy::score_samples;
use crate::model::{
    class_average_on, compute_centroids_lenient, fit, Batch, ClassifierModel, EpochRecord, LabeledSet, LossSpec,
    ModelError, Target,
};
use crate::{par, seed, CategoryId, SampleId};
use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub struct UpdateInputs<'a> {
    pub period: u32,
    /// Trained on the previous registry.
    pub model: &'a ClassifierModel,
    /// The new registry: previous classes first, then novel ones.
    pub classes: &'a [CategoryId],
    pub human: &'a LabeledSet,
    pub pseudo: &'a PseudoLabelSet,
    /// Samples without human labels whose predictions feed the pseudo pool.
    pub unlabeled: &'a [SampleId],
    pub manifest: &'a DatasetManifest,
    pub val: &'a LabeledSet,
    pub tau: f64,
    pub temperature: f64,
    pub cfg: &'a UpdateConfig,
    pub gate_init_bias: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatLog {
    pub repeat_index: usize,
    pub pseudo_source_version: u64,
    pub n_pseudo: usize,
    /// Candidates that fell below the threshold at this refresh.
    pub n_dropped: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    /// Version of this repeat's best snapshot.
    pub model_version: u64,
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub model: ClassifierModel,
    pub total_epochs: usize,
    pub best_score: f64,
    pub repeats: Vec<RepeatLog>,
    pub history: Vec<EpochRecord>,
    /// The pseudo-labels in force during the last repeat.
    pub final_pseudo: PseudoLabelSet,
}

fn pseudo_set(
    manifest: &DatasetManifest,
    pseudo: &PseudoLabelSet,
    classes: &[CategoryId],
) -> Result<LabeledSet, ModelError> {
    let index: BTreeMap<CategoryId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ids: Vec<SampleId> = pseudo.labels.keys().copied().collect();
    let mut labels = Vec::with_capacity(ids.len());
    for c in pseudo.labels.values() {
        labels.push(
            *index
                .get(c)
                .ok_or_else(|| ModelError::Shape(format!("pseudo-label category {c} is not in the registry")))?,
        );
    }
    let s = manifest.gather(&ids);
    let mut set = LabeledSet::new(ids, s.features, labels);
    set.pseudo = vec![true; set.len()];
    Ok(set)
}

/// One epoch of mixed batches: each batch takes `p` pseudo and `h` human rows while
/// both pools last, then fills up from whichever remains.
pub(crate) fn mixed_batches(
    human: &LabeledSet,
    pseudo: &LabeledSet,
    cfg: &UpdateConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Batch> {
    let (p, h) = cfg.batch_split();
    let mut ho: Vec<usize> = (0..human.len()).collect();
    let mut po: Vec<usize> = (0..pseudo.len()).collect();
    ho.shuffle(rng);
    po.shuffle(rng);
    let (mut hi, mut pi) = (0, 0);
    let mut batches = vec![];
    while hi < ho.len() || pi < po.len() {
        let mut take_p = p.min(po.len() - pi);
        let mut take_h = h.min(ho.len() - hi);
        let short = cfg.batch_size - take_p - take_h;
        if short > 0 {
            let extra_p = short.min(po.len() - pi - take_p);
            take_p += extra_p;
            take_h += (short - extra_p).min(ho.len() - hi - take_h);
        }
        let hrows = &ho[hi..hi + take_h];
        let prows = &po[pi..pi + take_p];
        hi += take_h;
        pi += take_p;
        let hx = human.features.select(Axis(0), hrows);
        let px = pseudo.features.select(Axis(0), prows);
        let features = concatenate(Axis(0), &[hx.view(), px.view()]).expect("same dims");
        let targets = hrows
            .iter()
            .map(|&r| Target::Class(human.labels[r]))
            .chain(prows.iter().map(|&r| Target::Class(pseudo.labels[r])))
            .collect();
        let mut is_pseudo = vec![false; take_h];
        is_pseudo.extend(std::iter::repeat_n(true, take_p));
        batches.push(Batch {
            features,
            targets,
            is_pseudo,
        });
    }
    batches
}

/// Semi-supervised update: expand the head for novel classes, switch the memory on,
/// then run `semi_repeats` training repeats on mixed human and pseudo-labelled batches.
/// Each repeat after the first regenerates pseudo-labels with the best model so far and
/// restarts the learning-rate schedule from it. The overall best snapshot on `val` is
/// returned.
pub fn run_model_update(inp: &UpdateInputs<'_>) -> Result<UpdateOutcome, PipelineError> {
    let period = inp.period;
    let cfg = inp.cfg;
    let k_old = inp.model.num_classes();
    let k_new = inp.classes.len();
    inp.human.check_labels(k_new).at(period)?;
    for class in k_old..k_new {
        if !inp.human.labels.contains(&class) {
            return Err(PipelineError::UnlabeledNovelClass {
                period,
                category: inp.classes[class],
            });
        }
    }
    let exec = par::Execution::default();
    let mut start = inp.model.clone();
    start.expand_head(k_new);
    if cfg.oltr {
        start.enable_oltr(inp.gate_init_bias);
    }

    let mut pseudo = inp.pseudo.clone();
    let mut best: Option<(f64, ClassifierModel)> = None;
    let mut repeats = vec![];
    let mut history = vec![];
    let mut total_epochs = 0;
    let mut version = inp.model.version;

    for r in 0..cfg.semi_repeats {
        let mut n_dropped = 0;
        if r > 0 {
            let (_, m) = best.as_ref().expect("a repeat has run");
            let s = inp.manifest.gather(inp.unlabeled);
            let verdicts = score_samples(m, &s.ids, s.features.view(), inp.temperature, inp.tau, exec).at(period)?;
            let mut labels = BTreeMap::new();
            for v in verdicts {
                if v.confident {
                    labels.insert(v.sample_id, inp.classes[v.predicted_class]);
                } else {
                    n_dropped += 1;
                }
            }
            pseudo = PseudoLabelSet {
                labels,
                source_model_version: m.version,
                repeat_index: r,
            };
        }
        let pseudo_rows = pseudo_set(inp.manifest, &pseudo, inp.classes).at(period)?;
        let pool = LabeledSet::concat(inp.human, &pseudo_rows);
        if pool.is_empty() {
            return Err(PipelineError::Model {
                period,
                source: ModelError::EmptyDataset,
            });
        }
        let from = match &best {
            Some((_, m)) => m.clone(),
            None => start.clone(),
        };
        let mut from = from;
        if from.oltr_enabled {
            from.memory = compute_centroids_lenient(&from, &pool).at(period)?;
        }
        from.version = version;
        let train_cfg = cfg.repeat_train_config(seed::derive(inp.seed, "update-repeat", r as u64));
        let out = fit(
            &from,
            &train_cfg,
            &LossSpec::cross_entropy(),
            |_, rng| mixed_batches(inp.human, &pseudo_rows, cfg, rng),
            |m| class_average_on(m, inp.val, exec),
            |m, _| {
                if m.oltr_enabled {
                    m.memory = compute_centroids_lenient(m, &pool)?;
                }
                Ok(())
            },
        )
        .at(period)?;
        total_epochs += out.history.len();
        version = out.model.version;
        repeats.push(RepeatLog {
            repeat_index: r,
            pseudo_source_version: pseudo.source_model_version,
            n_pseudo: pseudo.labels.len(),
            n_dropped,
            epochs: out.history.len(),
            best_epoch: out.best_epoch,
            best_score: out.best_score,
            model_version: out.model.version,
        });
        history.extend(out.history);
        let score = out.best_score.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, out.model));
        }
    }

    let (best_score, model) = best.expect("semi_repeats >= 1");
    Ok(UpdateOutcome {
        model,
        total_epochs,
        best_score,
        repeats,
        history,
        final_pseudo: pseudo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(n: usize, pseudo: bool) -> LabeledSet {
        let mut s = LabeledSet::new(
            (0..n as u64).collect(),
            ndarray::Array2::zeros((n, 2)),
            (0..n).map(|i| i % 2).collect(),
        );
        s.pseudo = vec![pseudo; n];
        s
    }

    #[test]
    fn half_pseudo_batches_when_both_pools_suffice() {
        let cfg = UpdateConfig::default();
        let mut rng = seed::rng(1);
        let b = mixed_batches(&set(200, false), &set(200, true), &cfg, &mut rng);
        assert_eq!(b.len(), 7);
        for batch in &b[..6] {
            assert_eq!(batch.is_pseudo.iter().filter(|&&p| p).count(), 32);
            assert_eq!(batch.is_pseudo.len(), 64);
        }
    }

    #[test]
    fn exhausted_pool_falls_back_to_the_other() {
        let cfg = UpdateConfig::default();
        let mut rng = seed::rng(1);
        let b = mixed_batches(&set(100, false), &set(10, true), &cfg, &mut rng);
        let sizes: Vec<usize> = b.iter().map(|x| x.is_pseudo.len()).collect();
        assert_eq!(sizes, vec![64, 46]);
        let human: usize = b.iter().map(|x| x.is_pseudo.iter().filter(|&&p| !p).count()).sum();
        assert_eq!(human, 100);
        let empty = mixed_batches(&set(70, false), &set(0, true), &cfg, &mut rng);
        assert_eq!(empty.iter().map(|x| x.targets.len()).collect::<Vec<_>>(), vec![64, 6]);
    }
}
