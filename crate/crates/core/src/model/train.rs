use super::loss::{loss_and_gradients, LossSpec};
use super::network::{ClassifierModel, ParamGroup, Params};
use super::ModelError;
use crate::{par, seed, SampleId};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Rows per inference chunk. Fixed so results do not depend on thread count.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub feature: f64,
    pub classifier: f64,
    pub memory: f64,
}

impl GroupRates {
    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Feature => self.feature,
            ParamGroup::Classifier => self.classifier,
            ParamGroup::Memory => self.memory,
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            feature: self.feature * f,
            classifier: self.classifier * f,
            memory: self.memory * f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rates: GroupRates,
    pub lr_decay_epochs: usize,
    pub lr_decay_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            rates: GroupRates {
                feature: 0.001,
                classifier: 0.01,
                memory: 0.0001,
            },
            lr_decay_epochs: 10,
            lr_decay_ratio: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        let r = self.rates;
        if !(r.feature > 0.0 && r.classifier > 0.0 && r.memory > 0.0) {
            return err(format!("learning rates must be > 0, got {r:?}"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.lr_decay_epochs == 0 || !(self.lr_decay_ratio > 0.0) {
            return err("lr decay needs epochs >= 1 and ratio > 0".into());
        }
        Ok(())
    }

    /// Step schedule: rates times `ratio^(epoch / decay_epochs)`.
    pub fn rates_at(&self, epoch: usize) -> GroupRates {
        self.rates
            .scaled(self.lr_decay_ratio.powi((epoch / self.lr_decay_epochs) as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// Contributes only to the energy term.
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub targets: Vec<Target>,
    pub is_pseudo: Vec<bool>,
}

/// Features with head-class labels. For evaluation sets a label `>= K` marks a category
/// the head cannot output; such rows always count as misclassified.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub sample_ids: Vec<SampleId>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub pseudo: Vec<bool>,
}

impl LabeledSet {
    pub fn new(sample_ids: Vec<SampleId>, features: Array2<f64>, labels: Vec<usize>) -> Self {
        let pseudo = vec![false; labels.len()];
        Self {
            sample_ids,
            features,
            labels,
            pseudo,
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self::new(vec![], Array2::zeros((0, dim)), vec![])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            pseudo: rows.iter().map(|&r| self.pseudo[r]).collect(),
        }
    }

    pub fn concat(a: &LabeledSet, b: &LabeledSet) -> Self {
        let features = if a.is_empty() {
            b.features.clone()
        } else if b.is_empty() {
            a.features.clone()
        } else {
            ndarray::concatenate(Axis(0), &[a.features.view(), b.features.view()]).expect("matching feature dims")
        };
        Self {
            sample_ids: a.sample_ids.iter().chain(&b.sample_ids).copied().collect(),
            features,
            labels: a.labels.iter().chain(&b.labels).copied().collect(),
            pseudo: a.pseudo.iter().chain(&b.pseudo).copied().collect(),
        }
    }

    pub fn check_labels(&self, classes: usize) -> Result<(), ModelError> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(ModelError::Label { label, classes }),
            None => Ok(()),
        }
    }
}

/// Cut `set` into batches following `order`.
pub fn batches_from(set: &LabeledSet, order: &[usize], batch_size: usize) -> Vec<Batch> {
    order
        .chunks(batch_size)
        .map(|rows| Batch {
            features: set.features.select(Axis(0), rows),
            targets: rows.iter().map(|&r| Target::Class(set.labels[r])).collect(),
            is_pseudo: rows.iter().map(|&r| set.pseudo[r]).collect(),
        })
        .collect()
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Params,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(like: &Params, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: like.zeros_like(),
            momentum,
            weight_decay,
        }
    }

    /// One update. Memory-group parameters are frozen unless `train_memory`.
    pub fn step(&mut self, params: &mut Params, grads: &Params, rates: GroupRates, train_memory: bool) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (((group, theta), (_, g)), (_, v)) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.velocity.blocks_mut())
        {
            if group == ParamGroup::Memory && !train_memory {
                continue;
            }
            let lr = rates.for_group(group);
            for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi + wd * *t;
                *t -= lr * *vi;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: f64,
    pub rates: GroupRates,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub history: Vec<EpochRecord>,
    /// Epoch whose snapshot was returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
}

/// Generic epoch loop behind every training phase.
///
/// Each epoch: `before_epoch` may refresh model state (the class memory), `batches`
/// yields that epoch's batches, then `score` rates the model on validation data. The
/// highest-scoring snapshot (earliest on ties) is returned with its version bumped.
pub fn fit<B, S, H>(
    model: &ClassifierModel,
    cfg: &TrainConfig,
    loss: &LossSpec,
    mut batches: B,
    mut score: S,
    mut before_epoch: H,
) -> Result<TrainOutcome, ModelError>
where
    B: FnMut(usize, &mut ChaCha8Rng) -> Vec<Batch>,
    S: FnMut(&ClassifierModel) -> f64,
    H: FnMut(&mut ClassifierModel, usize) -> Result<(), ModelError>,
{
    cfg.validate()?;
    let mut current = model.clone();
    let mut sgd = Sgd::new(&current.params, cfg.momentum, cfg.weight_decay);
    let mut rng = seed::stage_rng(cfg.seed, "fit-shuffle", 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ClassifierModel)> = None;

    for epoch in 0..cfg.epochs {
        before_epoch(&mut current, epoch)?;
        let rates = cfg.rates_at(epoch);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, batch) in batches(epoch, &mut rng).into_iter().enumerate() {
            if batch.targets.is_empty() {
                continue;
            }
            let (l, grads) = loss_and_gradients(&current, &batch, loss);
            if !l.total.is_finite() || !grads.all_finite() {
                return Err(ModelError::NonFiniteLoss {
                    loss: l.total,
                    epoch,
                    batch: bi,
                    lr_feature: rates.feature,
                    lr_classifier: rates.classifier,
                });
            }
            sgd.step(&mut current.params, &grads, rates, current.oltr_enabled);
            loss_sum += l.total;
            n_batches += 1;
        }
        let val_score = score(&current);
        history.push(EpochRecord {
            epoch,
            train_loss: if n_batches > 0 {
                loss_sum / n_batches as f64
            } else {
                0.0
            },
            val_score,
            rates,
        });
        if best.as_ref().is_none_or(|(_, s, _)| val_score > *s) {
            best = Some((epoch, val_score, current.clone()));
        }
    }

    Ok(match best {
        Some((epoch, s, mut m)) => {
            m.version = model.version + 1;
            TrainOutcome {
                model: m,
                history,
                best_epoch: Some(epoch),
                best_score: Some(s),
            }
        }
        None => TrainOutcome {
            model: model.clone(),
            history,
            best_epoch: None,
            best_score: None,
        },
    })
}

/// Mini-batch SGD on `train`, keeping the snapshot with the best validation
/// class-average accuracy.
pub fn train_supervised(
    model: &ClassifierModel,
    train: &LabeledSet,
    val: &LabeledSet,
    cfg: &TrainConfig,
    loss: &LossSpec,
) -> Result<TrainOutcome, ModelError> {
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            history: vec![],
            best_epoch: None,
            best_score: None,
        });
    }
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    train.check_labels(model.num_classes())?;
    let exec = par::Execution::default();
    let refresh = model.oltr_enabled;
    fit(
        model,
        cfg,
        loss,
        |_, rng| {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(rng);
            batches_from(train, &order, cfg.batch_size)
        },
        |m| class_average_on(m, val, exec),
        |m, _| {
            if refresh {
                m.memory = compute_centroids_lenient(m, train)?;
            }
            Ok(())
        },
    )
}

/// Logits for every row, computed in fixed chunks.
pub fn predict(
    model: &ClassifierModel,
    features: ArrayView2<f64>,
    exec: par::Execution,
) -> Result<Array2<f64>, ModelError> {
    let n = features.nrows();
    if n == 0 {
        return Ok(Array2::zeros((0, model.num_classes())));
    }
    let chunks = n.div_ceil(PREDICT_CHUNK);
    let parts = par::map_range(exec, chunks, |c| {
        let lo = c * PREDICT_CHUNK;
        let hi = (lo + PREDICT_CHUNK).min(n);
        model.forward(features.slice(ndarray::s![lo..hi, ..])).map(|o| o.logits)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("uniform logit width"))
}

/// Unweighted mean over the labels present in `set` of per-label accuracy.
pub fn class_average_on(model: &ClassifierModel, set: &LabeledSet, exec: par::Execution) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let logits = predict(model, set.features.view(), exec).expect("validation dims match model");
    let mut tally: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (row, &label) in logits.rows().into_iter().zip(&set.labels) {
        let pred = crate::energy::argmax(row.as_slice().expect("standard layout"));
        let e = tally.entry(label).or_default();
        e.0 += usize::from(pred == label);
        e.1 += 1;
    }
    tally.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / tally.len() as f64
}

/// Per-class mean of direct embeddings under the current extractor.
pub fn compute_centroids(model: &ClassifierModel, set: &LabeledSet) -> Result<Array2<f64>, ModelError> {
    let (sums, counts) = centroid_sums(model, set)?;
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(ModelError::EmptyCentroid { class, category: None });
    }
    Ok(finish_centroids(sums, &counts, None))
}

/// As [`compute_centroids`], but classes without samples keep their current row.
pub fn compute_centroids_lenient(model: &ClassifierModel, set: &LabeledSet) -> Result<Array2<f64>, ModelError> {
    let (sums, counts) = centroid_sums(model, set)?;
    Ok(finish_centroids(sums, &counts, Some(&model.memory)))
}

fn centroid_sums(model: &ClassifierModel, set: &LabeledSet) -> Result<(Array2<f64>, Vec<usize>), ModelError> {
    let k = model.num_classes();
    set.check_labels(k)?;
    let emb = model.embed_direct(set.features.view())?;
    let mut sums = Array2::zeros((k, emb.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &label) in emb.rows().into_iter().zip(&set.labels) {
        let mut acc = sums.row_mut(label);
        acc += &row;
        counts[label] += 1;
    }
    Ok((sums, counts))
}

fn finish_centroids(mut sums: Array2<f64>, counts: &[usize], fallback: Option<&Array2<f64>>) -> Array2<f64> {
    for (k, &c) in counts.iter().enumerate() {
        let mut row = sums.row_mut(k);
        if c > 0 {
            row /= c as f64;
        } else if let Some(old) = fallback {
            row.assign(&old.row(k));
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelDims};
    use ndarray::Array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n_per: usize, seed_value: u64) -> LabeledSet {
        let mut rng = seed::rng(seed_value);
        let centers = [[2.0, 2.0, 0.0, 0.0], [-2.0, -2.0, 0.0, 0.0]];
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let c = i % 2;
            for &m in &centers[c] {
                feats.push(m + 0.5 * rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
        let n = labels.len();
        LabeledSet::new(
            (0..n as u64).collect(),
            Array2::from_shape_vec((n, 4), feats).unwrap(),
            labels,
        )
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let m = ClassifierModel::new(4, 2, &ModelConfig::default(), 1);
        let data = blobs(10, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_supervised(&m, &data, &data, &cfg, &LossSpec::cross_entropy()).unwrap();
        assert_eq!(out.model, m);
        assert!(out.history.is_empty());
    }

    #[test]
    fn weight_decay_scales_parameter_exactly() {
        let dims = ModelDims {
            input: 2,
            hidden: 2,
            embedding: 2,
            classes: 2,
        };
        let mut p = Params::zeros(dims);
        p.w1.fill(3.0);
        p.wc.fill(-2.0);
        let zero = p.zeros_like();
        let mut sgd = Sgd::new(&p, 0.9, 0.0005);
        let rates = GroupRates {
            feature: 0.1,
            classifier: 0.01,
            memory: 0.001,
        };
        sgd.step(&mut p, &zero, rates, true);
        assert_eq!(p.w1[[0, 0]], 3.0 - 0.1 * 0.0005 * 3.0);
        assert_eq!(p.wc[[1, 1]], -2.0 - 0.01 * 0.0005 * -2.0);
    }

    #[test]
    fn step_schedule_decays_by_ratio() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.rates_at(9).feature, 0.001);
        assert!((cfg.rates_at(10).feature - 0.0001).abs() < 1e-18);
        assert!((cfg.rates_at(25).classifier - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn best_snapshot_matches_history_max() {
        let m = ClassifierModel::new(4, 2, &ModelConfig::default(), 3);
        let train = blobs(60, 4);
        let val = blobs(30, 5);
        let cfg = TrainConfig {
            epochs: 8,
            rates: GroupRates {
                feature: 0.01,
                classifier: 0.05,
                memory: 0.001,
            },
            lr_decay_epochs: 4,
            ..TrainConfig::default()
        };
        let out = train_supervised(&m, &train, &val, &cfg, &LossSpec::cross_entropy()).unwrap();
        let max = out.history.iter().map(|h| h.val_score).fold(f64::MIN, f64::max);
        let again = class_average_on(&out.model, &val, par::Execution::Sequential);
        assert_eq!(again, max);
        assert_eq!(out.model.version, m.version + 1);
    }

    #[test]
    fn nan_inputs_abort_with_diagnostics() {
        let m = ClassifierModel::new(4, 2, &ModelConfig::default(), 3);
        let mut train = blobs(10, 4);
        train.features[[3, 1]] = f64::NAN;
        let err =
            train_supervised(&m, &train, &train, &TrainConfig::default(), &LossSpec::cross_entropy()).unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteLoss { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn centroids_match_brute_force_means() {
        let m = ClassifierModel::new(4, 3, &ModelConfig::default(), 8);
        let mut rng = seed::rng(2);
        let n = 30;
        let feats = Array::from_shape_fn((n, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 3).collect();
        let set = LabeledSet::new((0..n as u64).collect(), feats.clone(), labels.clone());
        let c = compute_centroids(&m, &set).unwrap();
        for k in 0..3 {
            let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            let mut mean = vec![0.0; 8];
            for &r in &rows {
                let e = m.embed_direct(feats.slice(ndarray::s![r..r + 1, ..])).unwrap();
                for j in 0..8 {
                    mean[j] += e[[0, j]] / rows.len() as f64;
                }
            }
            for j in 0..8 {
                assert!((c[[k, j]] - mean[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn centroid_of_one_or_duplicates_is_the_embedding() {
        let m = ClassifierModel::new(4, 2, &ModelConfig::default(), 8);
        let x =
            Array2::from_shape_vec((3, 4), vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let set = LabeledSet::new(vec![0, 1, 2], x.clone(), vec![0, 1, 1]);
        let c = compute_centroids(&m, &set).unwrap();
        let e = m.embed_direct(x.view()).unwrap();
        assert_eq!(c.row(0), e.row(0));
        assert!((&c.row(1) - &e.row(1)).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn empty_class_centroid_is_an_error() {
        let m = ClassifierModel::new(4, 3, &ModelConfig::default(), 8);
        let set = LabeledSet::new(vec![0, 1], Array2::zeros((2, 4)), vec![0, 2]);
        assert!(matches!(
            compute_centroids(&m, &set),
            Err(ModelError::EmptyCentroid { class: 1, .. })
        ));
    }

    #[test]
    fn predict_matches_single_forward() {
        let m = ClassifierModel::new(4, 3, &ModelConfig::default(), 8);
        let x = Array::from_shape_fn((700, 4), |(i, j)| ((i * 4 + j) as f64 * 0.01).sin());
        let full = m.forward(x.view()).unwrap().logits;
        let seq = predict(&m, x.view(), par::Execution::Sequential).unwrap();
        let par_ = predict(&m, x.view(), par::Execution::default()).unwrap();
        assert_eq!(seq, par_);
        assert!((&seq - &full).iter().all(|d| d.abs() < 1e-12));
    }
}
