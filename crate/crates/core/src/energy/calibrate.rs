//! Threshold calibration on validation scores (`-E`, higher = more confident).

use super::EnergyError;
use serde::{Deserialize, Serialize};

pub const HISTOGRAM_BINS: usize = 64;

/// A known-class validation score and whether the prediction behind it was right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownScore {
    pub score: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationTarget {
    /// Maximise TPR(known) − FPR(unknown).
    Youden,
    /// Lowest τ whose confident known predictions reach this accuracy.
    AccuracyFloor { floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub known_confident_rate: f64,
    pub unknown_confident_rate: f64,
    pub youden_j: f64,
    pub high_conf_accuracy: Option<f64>,
}

struct Sweep {
    /// Candidate thresholds, ascending.
    taus: Vec<f64>,
    /// Counts strictly above each candidate.
    known_above: Vec<usize>,
    correct_above: Vec<usize>,
    unknown_above: Vec<usize>,
}

fn sweep(known: &[KnownScore], unknown: &[f64]) -> Result<Sweep, EnergyError> {
    if known.is_empty() || unknown.is_empty() {
        return Err(EnergyError::Calibration("both score sets must be non-empty".into()));
    }
    if known.iter().any(|k| !k.score.is_finite()) || unknown.iter().any(|u| !u.is_finite()) {
        return Err(EnergyError::Calibration("scores must be finite".into()));
    }
    // (score, is_known, correct), descending
    let mut pooled: Vec<(f64, bool, bool)> = known
        .iter()
        .map(|k| (k.score, true, k.correct))
        .chain(unknown.iter().map(|&u| (u, false, false)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut s = Sweep {
        taus: vec![],
        known_above: vec![],
        correct_above: vec![],
        unknown_above: vec![],
    };
    let (mut ka, mut ca, mut ua) = (0, 0, 0);
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == v {
            let (_, is_known, correct) = pooled[i];
            if is_known {
                ka += 1;
                ca += usize::from(correct);
            } else {
                ua += 1;
            }
            i += 1;
        }
        if i < pooled.len() {
            s.taus.push(0.5 * (v + pooled[i].0));
            s.known_above.push(ka);
            s.correct_above.push(ca);
            s.unknown_above.push(ua);
        }
    }
    s.taus.reverse();
    s.known_above.reverse();
    s.correct_above.reverse();
    s.unknown_above.reverse();
    Ok(s)
}

/// Pick τ on validation scores. Candidates are midpoints between consecutive distinct
/// pooled scores; ties go to the lowest candidate.
pub fn calibrate_threshold(
    known: &[KnownScore],
    unknown: &[f64],
    target: &CalibrationTarget,
) -> Result<Calibration, EnergyError> {
    let s = sweep(known, unknown)?;
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    let at = |i: usize| {
        let j = s.known_above[i] as f64 / nk - s.unknown_above[i] as f64 / nu;
        Calibration {
            tau: s.taus[i],
            known_confident_rate: s.known_above[i] as f64 / nk,
            unknown_confident_rate: s.unknown_above[i] as f64 / nu,
            youden_j: j,
            high_conf_accuracy: (s.known_above[i] > 0).then(|| s.correct_above[i] as f64 / s.known_above[i] as f64),
        }
    };
    match target {
        CalibrationTarget::Youden => {
            let mut best: Option<Calibration> = None;
            for i in 0..s.taus.len() {
                let c = at(i);
                if best.as_ref().is_none_or(|b| c.youden_j > b.youden_j) {
                    best = Some(c);
                }
            }
            match best {
                Some(b) if b.youden_j > 0.0 => Ok(b),
                _ => Err(EnergyError::Calibration(
                    "known and unknown scores are inseparable (no threshold with positive Youden J)".into(),
                )),
            }
        }
        CalibrationTarget::AccuracyFloor { floor } => {
            for i in 0..s.taus.len() {
                let c = at(i);
                if c.high_conf_accuracy.is_some_and(|a| a >= *floor) {
                    return Ok(c);
                }
            }
            let frontier: Vec<(f64, f64, usize)> = (0..s.taus.len())
                .filter_map(|i| at(i).high_conf_accuracy.map(|a| (s.taus[i], a, s.known_above[i])))
                .collect();
            let best = frontier
                .iter()
                .map(|f| f.1)
                .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))));
            let step = frontier.len().div_ceil(16).max(1);
            Err(EnergyError::Unattainable {
                target: *floor,
                best,
                frontier: frontier.into_iter().step_by(step).collect(),
            })
        }
    }
}

/// Area under the ROC curve for "known scores above unknown scores", ties counted half.
pub fn auroc(known: &[f64], unknown: &[f64]) -> f64 {
    if known.is_empty() || unknown.is_empty() {
        return f64::NAN;
    }
    let mut u: Vec<f64> = unknown.to_vec();
    u.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &k in known {
        let below = u.partition_point(|&x| x < k);
        let not_above = u.partition_point(|&x| x <= k);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    wins / (known.len() as f64 * unknown.len() as f64)
}

/// Softmax-threshold baseline at a target high-confidence accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxOperatingPoint {
    pub threshold: f64,
    pub high_conf_ratio: f64,
    pub high_conf_accuracy: f64,
    pub novel_detect_ratio: f64,
    /// Whether the accuracy landed within the requested tolerance.
    pub matched: bool,
}

/// Among thresholds whose confident-known accuracy is within `tolerance` of
/// `target_accuracy`, return the one that flags the most unknown samples. Without any
/// match, the threshold with the closest accuracy is returned with `matched = false`.
pub fn softmax_threshold_at_accuracy(
    known: &[KnownScore],
    unknown: &[f64],
    target_accuracy: f64,
    tolerance: f64,
) -> Result<SoftmaxOperatingPoint, EnergyError> {
    let s = sweep(known, unknown)?;
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    let mut best: Option<(bool, f64, SoftmaxOperatingPoint)> = None;
    for i in 0..s.taus.len() {
        if s.known_above[i] == 0 {
            continue;
        }
        let acc = s.correct_above[i] as f64 / s.known_above[i] as f64;
        let gap = (acc - target_accuracy).abs();
        let matched = gap <= tolerance;
        let p = SoftmaxOperatingPoint {
            threshold: s.taus[i],
            high_conf_ratio: s.known_above[i] as f64 / nk,
            high_conf_accuracy: acc,
            novel_detect_ratio: 1.0 - s.unknown_above[i] as f64 / nu,
            matched,
        };
        let better = match &best {
            None => true,
            Some((bm, bgap, bp)) => match (matched, *bm) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => p.novel_detect_ratio > bp.novel_detect_ratio,
                (false, false) => gap < *bgap,
            },
        };
        if better {
            best = Some((matched, gap, p));
        }
    }
    best.map(|b| b.2)
        .ok_or_else(|| EnergyError::Calibration("no threshold leaves any confident known sample".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub known: Vec<u64>,
    pub unknown: Vec<u64>,
}

impl ScoreHistogram {
    /// Fixed 64-bin layout over the pooled score range.
    pub fn build(known: &[f64], unknown: &[f64]) -> Self {
        let all = known.iter().chain(unknown);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let bin = |x: f64| {
            if width > 0.0 {
                (((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                0
            }
        };
        let mut h = Self {
            lo,
            hi,
            bins: HISTOGRAM_BINS,
            known: vec![0; HISTOGRAM_BINS],
            unknown: vec![0; HISTOGRAM_BINS],
        };
        known.iter().for_each(|&x| h.known[bin(x)] += 1);
        unknown.iter().for_each(|&x| h.unknown[bin(x)] += 1);
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    pub auroc: f64,
    pub youden_j: f64,
    pub mean_known: f64,
    pub mean_unknown: f64,
    pub n_known: usize,
    pub n_unknown: usize,
}

impl SeparationStats {
    pub fn compute(known: &[f64], unknown: &[f64], youden_j: f64) -> Self {
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
        Self {
            auroc: auroc(known, unknown),
            youden_j,
            mean_known: mean(known),
            mean_unknown: mean(unknown),
            n_known: known.len(),
            n_unknown: unknown.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub period: u32,
    pub tau: f64,
    pub m_known: f64,
    pub m_unknown: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub separation: SeparationStats,
    pub histogram: ScoreHistogram,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn ks(scores: &[f64]) -> Vec<KnownScore> {
        scores
            .iter()
            .map(|&score| KnownScore { score, correct: true })
            .collect()
    }

    #[test]
    fn separable_scores_threshold_between() {
        for target in [
            CalibrationTarget::Youden,
            CalibrationTarget::AccuracyFloor { floor: 0.9 },
        ] {
            let c = calibrate_threshold(&ks(&[10.0; 5]), &[0.0; 7], &target).unwrap();
            assert!(c.tau > 0.0 && c.tau < 10.0);
        }
    }

    #[test]
    fn identical_distributions_are_rejected() {
        let r = calibrate_threshold(&ks(&[1.0, 2.0, 3.0]), &[1.0, 2.0, 3.0], &CalibrationTarget::Youden);
        assert!(matches!(r, Err(EnergyError::Calibration(_))));
    }

    /// O(n²) scan over every midpoint, independent of the sweep.
    fn brute_force_youden(known: &[f64], unknown: &[f64]) -> f64 {
        let mut vals: Vec<f64> = known.iter().chain(unknown).copied().collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for w in vals.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let tpr = known.iter().filter(|&&k| k > t).count() as f64 / known.len() as f64;
            let fpr = unknown.iter().filter(|&&u| u > t).count() as f64 / unknown.len() as f64;
            if tpr - fpr > best.0 {
                best = (tpr - fpr, t);
            }
        }
        best.1
    }

    #[test]
    fn youden_matches_brute_force_scan() {
        for s in 0..20 {
            let mut rng = seed::rng(s);
            let known: Vec<f64> = (0..150).map(|_| 2.0 + rng.sample::<f64, _>(StandardNormal)).collect();
            let unknown: Vec<f64> = (0..90).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let c = calibrate_threshold(&ks(&known), &unknown, &CalibrationTarget::Youden).unwrap();
            assert_eq!(c.tau, brute_force_youden(&known, &unknown), "seed {s}");
        }
    }

    #[test]
    fn raising_the_floor_never_lowers_tau() {
        let mut rng = seed::rng(4);
        let known: Vec<KnownScore> = (0..400)
            .map(|_| {
                let score = rng.sample::<f64, _>(StandardNormal);
                // correctness more likely at high scores
                let correct = rng.random::<f64>() < 1.0 / (1.0 + (-2.0 * score).exp());
                KnownScore { score, correct }
            })
            .collect();
        let unknown = vec![-3.0, -2.5];
        let mut last = f64::NEG_INFINITY;
        for floor in [0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95] {
            match calibrate_threshold(&known, &unknown, &CalibrationTarget::AccuracyFloor { floor }) {
                Ok(c) => {
                    assert!(c.tau >= last);
                    assert!(c.high_conf_accuracy.unwrap() >= floor);
                    last = c.tau;
                }
                Err(EnergyError::Unattainable { best, .. }) => assert!(best.unwrap() < floor),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn unattainable_floor_reports_frontier() {
        let known = vec![
            KnownScore {
                score: 1.0,
                correct: true,
            },
            KnownScore {
                score: 2.0,
                correct: false,
            },
        ];
        match calibrate_threshold(&known, &[0.0], &CalibrationTarget::AccuracyFloor { floor: 0.99 }) {
            Err(EnergyError::Unattainable { best, frontier, .. }) => {
                assert_eq!(best, Some(0.5));
                assert!(!frontier.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn auroc_extremes() {
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]), 1.0);
        assert_eq!(auroc(&[1.0], &[1.0]), 0.5);
        assert_eq!(auroc(&[0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn histogram_layout_is_fixed() {
        let h = ScoreHistogram::build(&[0.0, 1.0, 2.0], &[-1.0, 5.0]);
        assert_eq!(h.known.len(), HISTOGRAM_BINS);
        assert_eq!(h.known.iter().sum::<u64>(), 3);
        assert_eq!(h.unknown[HISTOGRAM_BINS - 1], 1);
        assert_eq!(h.unknown[0], 1);
    }

    #[test]
    fn softmax_point_prefers_matched_accuracy() {
        let known = vec![
            KnownScore {
                score: 0.9,
                correct: true,
            },
            KnownScore {
                score: 0.8,
                correct: true,
            },
            KnownScore {
                score: 0.7,
                correct: false,
            },
            KnownScore {
                score: 0.6,
                correct: true,
            },
        ];
        let unknown = vec![0.65, 0.85];
        let p = softmax_threshold_at_accuracy(&known, &unknown, 1.0, 0.01).unwrap();
        assert!(p.matched);
        assert_eq!(p.high_conf_accuracy, 1.0);
        // thresholds 0.75 and 0.825 and 0.875 all give accuracy 1; 0.875 flags both unknowns
        assert_eq!(p.novel_detect_ratio, 1.0);
    }
}
