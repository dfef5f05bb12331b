use super::{auroc, energy_unchecked, EnergyConfig, EnergyError};
use crate::model::{
    compute_centroids_lenient, fit, predict, Batch, ClassifierModel, EnergyTerm, EpochRecord, LabeledSet, LossSpec,
    Target,
};
use crate::par;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

/// Known and unknown training and validation data for one fine-tuning run.
#[derive(Debug, Clone)]
pub struct FineTuneData {
    pub known_train: LabeledSet,
    pub unknown_train: Array2<f64>,
    pub known_val: LabeledSet,
    pub unknown_val: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub model: ClassifierModel,
    pub m_known: f64,
    pub m_unknown: f64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Validation AUROC of `-E` (known vs unknown) before and after.
    pub auroc_before: f64,
    pub auroc_after: f64,
    /// Mean validation energy of unknown minus known samples, before and after.
    pub energy_gap_before: f64,
    pub energy_gap_after: f64,
}

/// Per-batch counts of known and unknown samples: `batch · ratio_i / (ratio_k + ratio_u)`.
pub fn split_ratio(batch_size: usize, ratio: [u32; 2]) -> (usize, usize) {
    let total = (ratio[0] + ratio[1]) as usize;
    let known = (batch_size * ratio[0] as usize / total).max(1);
    (known, batch_size.saturating_sub(known).max(1))
}

/// Linear-interpolated percentile, `q ∈ [0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Margins anchored on the distribution of known training energies.
pub fn margins_from_percentiles(energies: &[f64], percentiles: [f64; 2]) -> Result<(f64, f64), EnergyError> {
    if energies.is_empty() {
        return Err(EnergyError::Config("no known energies to anchor margins on".into()));
    }
    let mut sorted = energies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mk, mu) = (percentile(&sorted, percentiles[0]), percentile(&sorted, percentiles[1]));
    if mk >= mu {
        return Err(EnergyError::Config(format!(
            "degenerate margins: m_known {mk} is not below m_unknown {mu}"
        )));
    }
    Ok((mk, mu))
}

fn energies(model: &ClassifierModel, x: &Array2<f64>, t: f64, exec: par::Execution) -> Result<Vec<f64>, EnergyError> {
    let logits = predict(model, x.view(), exec)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| energy_unchecked(r.as_slice().expect("standard layout"), t))
        .collect())
}

fn separation(
    model: &ClassifierModel,
    data: &FineTuneData,
    t: f64,
    exec: par::Execution,
) -> Result<(f64, f64), EnergyError> {
    let ek = energies(model, &data.known_val.features, t, exec)?;
    let eu = energies(model, &data.unknown_val, t, exec)?;
    let neg = |v: &[f64]| v.iter().map(|e| -e).collect::<Vec<_>>();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((auroc(&neg(&ek), &neg(&eu)), mean(&eu) - mean(&ek)))
}

/// Fine-tunes a copy of `model` on mixed known/unknown batches with cross-entropy plus
/// the weighted energy margin loss, and returns the epoch snapshot with the best
/// validation AUROC between known and unknown `-E` scores.
pub fn fine_tune_energy(
    model: &ClassifierModel,
    data: &FineTuneData,
    cfg: &EnergyConfig,
) -> Result<FineTuneOutcome, EnergyError> {
    cfg.validate()?;
    if data.unknown_train.nrows() == 0 {
        return Err(EnergyError::Config(
            "energy fine-tuning needs a non-empty unknown pool".into(),
        ));
    }
    if data.known_train.is_empty() {
        return Err(EnergyError::Config(
            "energy fine-tuning needs known training samples".into(),
        ));
    }
    if data.known_val.is_empty() || data.unknown_val.nrows() == 0 {
        return Err(EnergyError::Config(
            "energy fine-tuning needs known and unknown validation samples".into(),
        ));
    }
    data.known_train.check_labels(model.num_classes())?;
    let exec = par::Execution::default();
    let t = cfg.temperature;

    let known_energies = energies(model, &data.known_train.features, t, exec)?;
    let (mut m_known, mut m_unknown) = match (cfg.margin_known, cfg.margin_unknown) {
        (Some(k), Some(u)) => (k, u),
        _ => margins_from_percentiles(&known_energies, cfg.margin_percentiles)?,
    };
    if let Some(k) = cfg.margin_known {
        m_known = k;
    }
    if let Some(u) = cfg.margin_unknown {
        m_unknown = u;
    }
    if m_known >= m_unknown {
        return Err(EnergyError::Config(format!(
            "m_known ({m_known}) must lie below m_unknown ({m_unknown})"
        )));
    }

    let (auroc_before, energy_gap_before) = separation(model, data, t, exec)?;
    let loss = LossSpec::with_energy(EnergyTerm {
        temperature: t,
        m_known,
        m_unknown,
        weight: cfg.energy_weight,
    });
    let (per_known, per_unknown) = split_ratio(cfg.fine_tune.batch_size, cfg.known_unknown_ratio);
    let known = &data.known_train;
    let unknown = &data.unknown_train;
    let mut unknown_order: Vec<usize> = (0..unknown.nrows()).collect();
    let mut cursor = unknown_order.len();
    let refresh = model.oltr_enabled;

    let outcome = fit(
        model,
        &cfg.fine_tune,
        &loss,
        |_, rng| {
            let mut order: Vec<usize> = (0..known.len()).collect();
            order.shuffle(rng);
            order
                .chunks(per_known)
                .map(|rows| {
                    let mut urows = Vec::with_capacity(per_unknown);
                    while urows.len() < per_unknown {
                        if cursor == unknown_order.len() {
                            unknown_order.shuffle(rng);
                            cursor = 0;
                        }
                        urows.push(unknown_order[cursor]);
                        cursor += 1;
                    }
                    let kx = known.features.select(Axis(0), rows);
                    let ux = unknown.select(Axis(0), &urows);
                    let features = ndarray::concatenate(Axis(0), &[kx.view(), ux.view()]).expect("same dims");
                    let mut targets: Vec<Target> = rows.iter().map(|&r| Target::Class(known.labels[r])).collect();
                    targets.extend(std::iter::repeat_n(Target::Unknown, urows.len()));
                    let mut is_pseudo: Vec<bool> = rows.iter().map(|&r| known.pseudo[r]).collect();
                    is_pseudo.extend(std::iter::repeat_n(false, urows.len()));
                    Batch {
                        features,
                        targets,
                        is_pseudo,
                    }
                })
                .collect()
        },
        |m| separation(m, data, t, exec).map(|s| s.0).unwrap_or(f64::NEG_INFINITY),
        |m, _| {
            if refresh {
                m.memory = compute_centroids_lenient(m, known)?;
            }
            Ok(())
        },
    )?;
    let (auroc_after, energy_gap_after) = separation(&outcome.model, data, t, exec)?;
    Ok(FineTuneOutcome {
        model: outcome.model,
        m_known,
        m_unknown,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        auroc_before,
        auroc_after,
        energy_gap_before,
        energy_gap_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train_supervised, ModelConfig, TrainConfig};
    use crate::seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(centers: &[[f64; 2]], per: usize, seed_value: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = seed::rng(seed_value);
        let mut x = Array2::zeros((centers.len() * per, 2));
        let mut y = vec![];
        for (c, m) in centers.iter().enumerate() {
            for i in 0..per {
                let r = c * per + i;
                x[[r, 0]] = m[0] + 0.5 * rng.sample::<f64, _>(StandardNormal);
                x[[r, 1]] = m[1] + 0.5 * rng.sample::<f64, _>(StandardNormal);
                y.push(c);
            }
        }
        (x, y)
    }

    fn setup() -> (ClassifierModel, FineTuneData) {
        let known = [[3.0, 0.0], [-3.0, 0.0], [0.0, 3.0]];
        let unk = [[0.0, -3.0], [0.0, 0.0]];
        let (kx, ky) = blobs(&known, 60, 1);
        let (vx, vy) = blobs(&known, 20, 2);
        let (ux, _) = blobs(&unk, 60, 3);
        let (uvx, _) = blobs(&unk, 20, 4);
        let ids = |n: usize| (0..n as u64).collect::<Vec<_>>();
        let train = LabeledSet::new(ids(kx.nrows()), kx, ky);
        let val = LabeledSet::new(ids(vx.nrows()), vx, vy);
        let base = ClassifierModel::new(2, 3, &ModelConfig::default(), 5);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            rates: crate::model::GroupRates {
                feature: 0.05,
                classifier: 0.05,
                memory: 0.001,
            },
            ..TrainConfig::default()
        };
        let trained = train_supervised(&base, &train, &val, &cfg, &LossSpec::cross_entropy()).unwrap();
        (
            trained.model,
            FineTuneData {
                known_train: train,
                unknown_train: ux,
                known_val: val,
                unknown_val: uvx,
            },
        )
    }

    #[test]
    fn batch_split_follows_ratio() {
        assert_eq!(split_ratio(96, [1, 2]), (32, 64));
        assert_eq!(split_ratio(10, [1, 1]), (5, 5));
    }

    #[test]
    fn percentile_interpolates() {
        let e: Vec<f64> = (0..=10).map(f64::from).collect();
        let (k, u) = margins_from_percentiles(&e, [0.8, 0.95]).unwrap();
        assert!((k - 8.0).abs() < 1e-12);
        assert!((u - 9.5).abs() < 1e-12);
        assert!(margins_from_percentiles(&[1.0; 5], [0.8, 0.95]).is_err());
    }

    #[test]
    fn fine_tuning_widens_the_energy_gap() {
        let (model, data) = setup();
        let cfg = EnergyConfig {
            energy_weight: 0.1,
            fine_tune: TrainConfig {
                epochs: 10,
                batch_size: 48,
                rates: crate::model::GroupRates {
                    feature: 0.01,
                    classifier: 0.01,
                    memory: 0.0001,
                },
                ..TrainConfig::default()
            },
            ..EnergyConfig::default()
        };
        let out = fine_tune_energy(&model, &data, &cfg).unwrap();
        assert!(out.m_known < out.m_unknown);
        assert!(
            out.energy_gap_after > out.energy_gap_before,
            "{} -> {}",
            out.energy_gap_before,
            out.energy_gap_after
        );
        assert_eq!(out.model.version, model.version + 1);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (model, data) = setup();
        let mut cfg = EnergyConfig::default();
        cfg.fine_tune.epochs = 0;
        let out = fine_tune_energy(&model, &data, &cfg).unwrap();
        assert_eq!(out.model.params, model.params);
        assert_eq!(out.model.version, model.version);
    }

    #[test]
    fn empty_unknown_pool_is_a_config_error() {
        let (model, mut data) = setup();
        data.unknown_train = Array2::zeros((0, 2));
        assert!(matches!(
            fine_tune_energy(&model, &data, &EnergyConfig::default()),
            Err(EnergyError::Config(_))
        ));
    }
}
