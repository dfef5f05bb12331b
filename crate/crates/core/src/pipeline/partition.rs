use crate::energy::{score_samples, EnergyError};
use crate::model::ClassifierModel;
use crate::records::{logits_digest, LabelSource, PredictionRecord};
use crate::{par, CategoryId, SampleId};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Confident predictions, carrying their argmax as pseudo-label.
    pub high: Vec<PredictionRecord>,
    pub low: Vec<PredictionRecord>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.high.len() + self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scores new samples and splits them on `-E > τ`. `classes[i]` is the category of
/// head class `i`. Each partition keeps input order.
pub fn infer_and_partition(
    model: &ClassifierModel,
    classes: &[CategoryId],
    ids: &[SampleId],
    features: ArrayView2<f64>,
    tau: f64,
    temperature: f64,
    exec: par::Execution,
) -> Result<Partition, EnergyError> {
    let verdicts = score_samples(model, ids, features, temperature, tau, exec)?;
    let mut p = Partition {
        high: vec![],
        low: vec![],
    };
    for v in verdicts {
        let predicted_category = classes[v.predicted_class];
        let mut r = PredictionRecord {
            sample_id: v.sample_id,
            predicted_category,
            logits_digest: logits_digest(&v.logits),
            energy: v.energy,
            softmax_max: v.softmax_max,
            confident: v.confident,
            label_source: LabelSource::None,
            final_label: None,
        };
        if v.confident {
            r.label_source = LabelSource::Pseudo;
            r.final_label = Some(predicted_category);
            p.high.push(r);
        } else {
            p.low.push(r);
        }
    }
    Ok(p)
}
