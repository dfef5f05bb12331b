//! Free-energy confidence.
//!
//! `E(x) = -T · log Σ_i exp(f_i(x) / T)` over the classifier logits; low energy means
//! in-distribution. A prediction is confident when `-E(x) > τ`. The margin loss pushes
//! known samples below `m_known` and unknown samples above `m_unknown`, and is added to
//! cross-entropy with weight `w` during fine-tuning.

mod calibrate;
mod finetune;
mod loss;

pub use calibrate::{
    auroc, calibrate_threshold, softmax_threshold_at_accuracy, Calibration, CalibrationReport, CalibrationTarget,
    KnownScore, ScoreHistogram, SeparationStats, SoftmaxOperatingPoint, HISTOGRAM_BINS,
};
pub use finetune::{fine_tune_energy, margins_from_percentiles, split_ratio, FineTuneData, FineTuneOutcome};
pub use loss::{energy_margin_grad, energy_margin_loss, total_loss};

use crate::model::{ClassifierModel, TrainConfig};
use crate::{par, SampleId};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("non-finite logit {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("empty logit vector")]
    Empty,
    #[error("invalid energy config: {0}")]
    Config(String),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("target accuracy {target} unattainable; best achievable is {best:?} (frontier {frontier:?})")]
    Unattainable {
        target: f64,
        best: Option<f64>,
        /// (threshold, accuracy, confident count) points of the achievable frontier.
        frontier: Vec<(f64, f64, usize)>,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub temperature: f64,
    /// Fixed τ; calibrated on validation data when absent.
    pub threshold: Option<f64>,
    /// Margin overrides; percentile anchoring is used for any that are absent.
    pub margin_known: Option<f64>,
    pub margin_unknown: Option<f64>,
    /// Percentiles of pre-fine-tuning known training energies for the two margins.
    pub margin_percentiles: [f64; 2],
    pub energy_weight: f64,
    pub known_unknown_ratio: [u32; 2],
    pub calibration: CalibrationTarget,
    /// Epochs, batch size and per-group rates of the fine-tuning run.
    pub fine_tune: TrainConfig,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            temperature: 1.5,
            threshold: None,
            margin_known: None,
            margin_unknown: None,
            margin_percentiles: [0.8, 0.95],
            energy_weight: 0.01,
            known_unknown_ratio: [1, 2],
            calibration: CalibrationTarget::Youden,
            fine_tune: TrainConfig {
                epochs: 10,
                batch_size: 96,
                ..TrainConfig::default()
            },
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let err = |m: String| Err(EnergyError::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.energy_weight >= 0.0 && self.energy_weight.is_finite()) {
            return err(format!("energy weight must be >= 0, got {}", self.energy_weight));
        }
        if self.known_unknown_ratio.iter().any(|&r| r < 1) {
            return err("known:unknown ratio components must be >= 1".into());
        }
        let [pk, pu] = self.margin_percentiles;
        if !(0.0..=1.0).contains(&pk) || !(0.0..=1.0).contains(&pu) || pk >= pu {
            return err(format!(
                "margin percentiles must satisfy 0 <= known < unknown <= 1, got {pk}, {pu}"
            ));
        }
        if let (Some(k), Some(u)) = (self.margin_known, self.margin_unknown) {
            if k >= u {
                return err(format!("m_known ({k}) must lie below m_unknown ({u})"));
            }
        }
        self.fine_tune
            .validate()
            .map_err(|e| EnergyError::Config(e.to_string()))
    }
}

fn check_finite(logits: &[f64]) -> Result<(), EnergyError> {
    if logits.is_empty() {
        return Err(EnergyError::Empty);
    }
    match logits.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(EnergyError::NonFinite {
            index,
            value: logits[index],
        }),
        None => Ok(()),
    }
}

/// Max-shifted `log Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Free energy of one logit vector at temperature `t`.
pub fn energy_score(logits: &[f64], t: f64) -> Result<f64, EnergyError> {
    check_finite(logits)?;
    if !(t > 0.0) {
        return Err(EnergyError::Config(format!("temperature must be > 0, got {t}")));
    }
    Ok(energy_unchecked(logits, t))
}

pub(crate) fn energy_unchecked(logits: &[f64], t: f64) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&x| ((x - m) / t).exp()).sum();
    -(m + t * s.ln())
}

/// `∂E/∂f = -softmax(f / T)`.
pub(crate) fn energy_logit_grad(logits: &[f64], t: f64, out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = ((x - m) / t).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o = -*o / s;
    }
}

/// Largest softmax probability.
pub fn softmax_confidence(logits: &[f64]) -> Result<f64, EnergyError> {
    check_finite(logits)?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    Ok(1.0 / s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVerdict {
    pub sample_id: SampleId,
    pub predicted_class: usize,
    pub energy: f64,
    pub neg_energy: f64,
    pub confident: bool,
    pub softmax_max: f64,
    pub logits: Vec<f64>,
}

/// Scores every row of `features`. Rows are processed in fixed-size chunks, in
/// parallel when enabled; output order follows input order.
pub fn score_samples(
    model: &ClassifierModel,
    ids: &[SampleId],
    features: ArrayView2<f64>,
    temperature: f64,
    tau: f64,
    exec: par::Execution,
) -> Result<Vec<ConfidenceVerdict>, EnergyError> {
    let logits = crate::model::predict(model, features, exec)?;
    let rows: Vec<usize> = (0..ids.len()).collect();
    let verdicts = par::map(exec, &rows, |&r| {
        let row = logits.row(r);
        let l = row.as_slice().expect("standard layout");
        check_finite(l)?;
        let energy = energy_unchecked(l, temperature);
        let neg_energy = -energy;
        let predicted_class = argmax(l);
        Ok(ConfidenceVerdict {
            sample_id: ids[r],
            predicted_class,
            energy,
            neg_energy,
            confident: neg_energy > tau,
            softmax_max: softmax_confidence(l)?,
            logits: l.to_vec(),
        })
    });
    verdicts.into_iter().collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_reference_values() {
        assert!((energy_score(&[0.0, 0.0], 1.0).unwrap() + 2f64.ln()).abs() < 1e-15);
        let e = energy_score(&[1.0, 0.0], 1.0).unwrap();
        assert!((e + (1f64.exp() + 1.0).ln()).abs() < 1e-15);
        assert!((e + 1.313_261_687_518_223).abs() < 1e-12);
        let big = energy_score(&[1000.0, 0.0], 1.0).unwrap();
        assert!(big.is_finite());
        assert!((big + 1000.0).abs() < 1e-12);
    }

    #[test]
    fn energy_rejects_bad_input() {
        assert!(matches!(
            energy_score(&[0.0, f64::NAN], 1.0),
            Err(EnergyError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(energy_score(&[], 1.0), Err(EnergyError::Empty)));
        assert!(energy_score(&[1.0], 0.0).is_err());
    }

    #[test]
    fn temperature_scales_energy() {
        // E_T(f) = T · E_1(f / T)
        let f = [2.0, -1.0, 0.5];
        let t = 0.06;
        let scaled: Vec<f64> = f.iter().map(|x| x / t).collect();
        let lhs = energy_score(&f, t).unwrap();
        let rhs = t * energy_score(&scaled, 1.0).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_reference_values() {
        assert_eq!(softmax_confidence(&[0.0, 0.0]).unwrap(), 0.5);
        let s = softmax_confidence(&[10.0, 0.0]).unwrap();
        assert!((s - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
        assert!((s - 0.999_954_6).abs() < 1e-7);
        assert_eq!(softmax_confidence(&[3.3]).unwrap(), 1.0);
    }

    #[test]
    fn huge_logits_stay_finite() {
        for l in [[1e6, -1e6, 3.0], [-1e6, -1e6, -1e6], [1e6, 1e6, 1e6]] {
            assert!(energy_score(&l, 1.0).unwrap().is_finite());
            assert!(energy_score(&l, 0.06).unwrap().is_finite());
        }
    }

    #[test]
    fn energy_grad_is_negative_softmax() {
        let f = [0.3, -1.0, 2.0];
        let mut g = [0.0; 3];
        energy_logit_grad(&f, 1.5, &mut g);
        let h = 1e-6;
        for i in 0..3 {
            let mut up = f;
            up[i] += h;
            let mut dn = f;
            dn[i] -= h;
            let fd = (energy_unchecked(&up, 1.5) - energy_unchecked(&dn, 1.5)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
