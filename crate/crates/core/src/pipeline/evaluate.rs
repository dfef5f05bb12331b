use crate::datagen::DatasetManifest;
use crate::energy::{argmax, energy_unchecked, softmax_confidence, EnergyError, KnownScore};
use crate::metrics::{class_average_accuracy, MetricError, Tally};
use crate::model::{predict, ClassifierModel, LabeledSet, ModelError};
use crate::{par, CategoryId, SampleId};
use std::collections::BTreeMap;

/// Training or validation rows for `ids`, labelled with the head class of each sample's
/// category. Categories outside `classes` get label `classes.len()`, which always
/// counts as wrong.
pub fn labeled_set(manifest: &DatasetManifest, ids: &[SampleId], classes: &[CategoryId]) -> LabeledSet {
    let s = manifest.gather(ids);
    let index: BTreeMap<CategoryId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let labels = s
        .truth
        .iter()
        .map(|c| index.get(c).copied().unwrap_or(classes.len()))
        .collect();
    LabeledSet::new(s.ids, s.features, labels)
}

/// One evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub sample_id: SampleId,
    pub truth: CategoryId,
    pub predicted: CategoryId,
    pub neg_energy: f64,
    pub softmax_max: f64,
}

impl ScoredSample {
    pub fn correct(&self) -> bool {
        self.truth == self.predicted
    }
}

#[derive(Debug, Clone)]
pub struct EvalContext {
    pub samples: Vec<ScoredSample>,
    pub tally: Tally,
}

impl EvalContext {
    pub fn class_average(&self, categories: &[CategoryId]) -> Result<f64, MetricError> {
        let pairs: Vec<(CategoryId, CategoryId)> = self.samples.iter().map(|s| (s.truth, s.predicted)).collect();
        class_average_accuracy(&pairs, categories)
    }

    pub fn energy_scores(&self) -> Vec<KnownScore> {
        self.samples
            .iter()
            .map(|s| KnownScore {
                score: s.neg_energy,
                correct: s.correct(),
            })
            .collect()
    }

    pub fn softmax_scores(&self) -> Vec<KnownScore> {
        self.samples
            .iter()
            .map(|s| KnownScore {
                score: s.softmax_max,
                correct: s.correct(),
            })
            .collect()
    }

    pub fn neg_energies(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.neg_energy).collect()
    }

    pub fn softmax_maxima(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.softmax_max).collect()
    }
}

/// Predicts every sample in `ids`, mapping head classes back to categories.
pub fn evaluate_known(
    model: &ClassifierModel,
    classes: &[CategoryId],
    manifest: &DatasetManifest,
    ids: &[SampleId],
    temperature: f64,
    exec: par::Execution,
) -> Result<EvalContext, EnergyError> {
    if classes.len() != model.num_classes() {
        return Err(EnergyError::Model(ModelError::Shape(format!(
            "{} registry classes for a {}-class head",
            classes.len(),
            model.num_classes()
        ))));
    }
    let s = manifest.gather(ids);
    let logits = predict(model, s.features.view(), exec)?;
    let mut samples = Vec::with_capacity(ids.len());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let l = row.as_slice().expect("standard layout");
        samples.push(ScoredSample {
            sample_id: s.ids[i],
            truth: s.truth[i],
            predicted: classes[argmax(l)],
            neg_energy: -energy_unchecked(l, temperature),
            softmax_max: softmax_confidence(l)?,
        });
    }
    let pairs: Vec<(CategoryId, CategoryId)> = samples.iter().map(|s| (s.truth, s.predicted)).collect();
    Ok(EvalContext {
        tally: Tally::from_pairs(&pairs, exec),
        samples,
    })
}
