use super::network::{softmax_rows, ClassifierModel, Params};
use super::train::{Batch, Target};
use crate::energy::{energy_logit_grad, energy_margin_grad, energy_margin_loss, energy_unchecked};
use ndarray::{Array2, ArrayView2};

/// Settings for the energy term of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerm {
    pub temperature: f64,
    pub m_known: f64,
    pub m_unknown: f64,
    pub weight: f64,
}

/// Cross-entropy on class-labelled rows, plus an optional weighted energy margin term
/// over all rows (class rows count as known, `Unknown` rows as unknown).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossSpec {
    pub energy: Option<EnergyTerm>,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self { energy: None }
    }

    pub fn with_energy(term: EnergyTerm) -> Self {
        Self { energy: Some(term) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub energy: f64,
}

/// Loss of a batch of logits and its gradient with respect to those logits.
pub fn loss_and_logit_grad(
    logits: ArrayView2<f64>,
    targets: &[Target],
    spec: &LossSpec,
) -> (LossBreakdown, Array2<f64>) {
    let (b, k) = logits.dim();
    assert_eq!(b, targets.len(), "one target per row");
    let mut grad = Array2::zeros((b, k));
    let labelled = targets.iter().filter(|t| matches!(t, Target::Class(_))).count();

    let mut ce = 0.0;
    if labelled > 0 {
        let probs = softmax_rows(&logits.to_owned());
        let n = labelled as f64;
        for (r, t) in targets.iter().enumerate() {
            if let Target::Class(y) = *t {
                ce -= probs[[r, y]].max(f64::MIN_POSITIVE).ln();
                for j in 0..k {
                    let onehot = if j == y { 1.0 } else { 0.0 };
                    grad[[r, j]] = (probs[[r, j]] - onehot) / n;
                }
            }
        }
        ce /= n;
    }

    let mut energy = 0.0;
    if let Some(term) = spec.energy {
        let rows: Vec<Vec<f64>> = logits.rows().into_iter().map(|r| r.to_vec()).collect();
        let energies: Vec<f64> = rows.iter().map(|l| energy_unchecked(l, term.temperature)).collect();
        let (known_rows, unknown_rows): (Vec<usize>, Vec<usize>) =
            (0..b).partition(|&r| matches!(targets[r], Target::Class(_)));
        let known: Vec<f64> = known_rows.iter().map(|&r| energies[r]).collect();
        let unknown: Vec<f64> = unknown_rows.iter().map(|&r| energies[r]).collect();
        energy = energy_margin_loss(&known, &unknown, term.m_known, term.m_unknown);
        let (gk, gu) = energy_margin_grad(&known, &unknown, term.m_known, term.m_unknown);
        let mut de = vec![0.0; k];
        for (rows_of, grads) in [(&known_rows, &gk), (&unknown_rows, &gu)] {
            for (&r, &g) in rows_of.iter().zip(grads.iter()) {
                if g == 0.0 {
                    continue;
                }
                energy_logit_grad(&rows[r], term.temperature, &mut de);
                for j in 0..k {
                    grad[[r, j]] += term.weight * g * de[j];
                }
            }
        }
        let total = crate::energy::total_loss(ce, energy, term.weight);
        return (
            LossBreakdown {
                total,
                cross_entropy: ce,
                energy,
            },
            grad,
        );
    }
    (
        LossBreakdown {
            total: ce,
            cross_entropy: ce,
            energy,
        },
        grad,
    )
}

/// Batch loss and parameter gradients (data term only; weight decay lives in the optimizer).
pub fn loss_and_gradients(model: &ClassifierModel, batch: &Batch, spec: &LossSpec) -> (LossBreakdown, Params) {
    let cache = model.forward_cached(batch.features.view());
    let (loss, dlogits) = loss_and_logit_grad(cache.logits.view(), &batch.targets, spec);
    (loss, model.backward(&cache, &dlogits))
}
