//! Calibration measures over (confidence, outcome) samples.
//!
//! All reductions run in the order the samples are given. Callers that need
//! bit-identical results across runs sort samples by id first (the pipeline
//! does).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("bin count must be at least 1")]
    NoBins,
    #[error("sample {id:?}: confidence {confidence} is outside [0, 1]")]
    ConfidenceOutOfRange { id: String, confidence: f64 },
    #[error("sample {id:?}: outcome {outcome} is not 0 or 1")]
    BadOutcome { id: String, outcome: u8 },
    #[error("skill score undefined: success rate {success_rate} gives zero reference Brier")]
    DegenerateBaseRate { success_rate: f64 },
    #[error("success rate {0} is outside [0, 1]")]
    BadSuccessRate(f64),
    #[error("correlation needs equal-length inputs of at least 2 values ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined for constant input")]
    ConstantInput,
}

/// One confidence paired with its binary outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub repo: String,
    pub confidence: f64,
    pub outcome: u8,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, repo: impl Into<String>, confidence: f64, outcome: u8) -> Self {
        Self {
            id: id.into(),
            repo: repo.into(),
            confidence,
            outcome,
        }
    }

    pub fn squared_error(&self) -> f64 {
        let d = self.confidence - f64::from(self.outcome);
        d * d
    }
}

pub fn check_samples(samples: &[LabeledSample]) -> Result<(), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    for s in samples {
        if !(0.0..=1.0).contains(&s.confidence) {
            return Err(MetricsError::ConfidenceOutOfRange {
                id: s.id.clone(),
                confidence: s.confidence,
            });
        }
        if s.outcome > 1 {
            return Err(MetricsError::BadOutcome {
                id: s.id.clone(),
                outcome: s.outcome,
            });
        }
    }
    Ok(())
}

/// Per-sample squared errors; their mean is the Brier score.
pub fn squared_errors(samples: &[LabeledSample]) -> Vec<f64> {
    samples.iter().map(LabeledSample::squared_error).collect()
}

/// Compensated (Neumaier) sum; keeps constant-predictor Brier scores exact
/// at the usual sample sizes.
pub(crate) fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    neumaier_sum(values) / n
}

pub fn brier(samples: &[LabeledSample]) -> Result<f64, MetricsError> {
    check_samples(samples)?;
    Ok(mean(samples.iter().map(LabeledSample::squared_error)))
}

pub fn success_rate(samples: &[LabeledSample]) -> Result<f64, MetricsError> {
    check_samples(samples)?;
    Ok(mean(samples.iter().map(|s| f64::from(s.outcome))))
}

/// Brier score of always predicting the base rate `p`: `p(1-p)`.
pub fn reference_brier(success_rate: f64) -> f64 {
    success_rate * (1.0 - success_rate)
}

/// `(B_ref - B) / B_ref` from a success rate and a Brier score.
pub fn skill_from_rates(success_rate: f64, brier: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&success_rate) {
        return Err(MetricsError::BadSuccessRate(success_rate));
    }
    let reference = reference_brier(success_rate);
    if reference == 0.0 {
        return Err(MetricsError::DegenerateBaseRate { success_rate });
    }
    Ok((reference - brier) / reference)
}

pub fn skill_score(samples: &[LabeledSample]) -> Result<f64, MetricsError> {
    skill_from_rates(success_rate(samples)?, brier(samples)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence of the bin's samples; 0 when empty.
    pub mean_confidence: f64,
    /// Fraction of the bin's samples with outcome 1; 0 when empty.
    pub accuracy: f64,
}

/// Index of the equal-width bin holding `confidence`; the last bin is closed.
fn bin_index(confidence: f64, n_bins: usize) -> usize {
    ((confidence * n_bins as f64) as usize).min(n_bins - 1)
}

pub fn reliability_bins(
    samples: &[LabeledSample],
    n_bins: usize,
) -> Result<Vec<ReliabilityBin>, MetricsError> {
    check_samples(samples)?;
    if n_bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let mut sums = vec![(0usize, 0.0f64, 0u64); n_bins];
    for s in samples {
        let slot = &mut sums[bin_index(s.confidence, n_bins)];
        slot.0 += 1;
        slot.1 += s.confidence;
        slot.2 += u64::from(s.outcome);
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, conf_sum, hits))| {
            let (mean_confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum / count as f64, hits as f64 / count as f64)
            };
            ReliabilityBin {
                lo: i as f64 / n_bins as f64,
                hi: (i + 1) as f64 / n_bins as f64,
                count,
                mean_confidence,
                accuracy,
            }
        })
        .collect())
}

/// Count-weighted mean of `|accuracy - mean_confidence|` over bins.
pub fn ece_from_bins(bins: &[ReliabilityBin]) -> f64 {
    let total: usize = bins.iter().map(|b| b.count).sum();
    if total == 0 {
        return 0.0;
    }
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / total as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

/// Expected calibration error over `n_bins` equal-width bins, with the bins.
pub fn ece(
    samples: &[LabeledSample],
    n_bins: usize,
) -> Result<(f64, Vec<ReliabilityBin>), MetricsError> {
    let bins = reliability_bins(samples, n_bins)?;
    Ok((ece_from_bins(&bins), bins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub success_rate: f64,
    pub brier: f64,
    pub ref_brier: f64,
    /// `None` when the success rate is 0 or 1.
    pub skill: Option<f64>,
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

pub fn calibration_report(
    samples: &[LabeledSample],
    n_bins: usize,
) -> Result<CalibrationReport, MetricsError> {
    let success_rate = success_rate(samples)?;
    let brier = brier(samples)?;
    let (ece, bins) = ece(samples, n_bins)?;
    Ok(CalibrationReport {
        n: samples.len(),
        success_rate,
        brier,
        ref_brier: reference_brier(success_rate),
        skill: skill_from_rates(success_rate, brier).ok(),
        ece,
        bins,
    })
}

/// Ranks starting at 1, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let mx = mean(x.iter().copied());
    let my = mean(y.iter().copied());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(pairs: &[(f64, u8)]) -> Vec<LabeledSample> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(c, o))| LabeledSample::new(format!("s{i}"), "r", c, o))
            .collect()
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&samples(&[(1.0, 1), (0.0, 0)])).unwrap(), 0.0);
        let ten: Vec<_> = (0..10).map(|i| (0.1, u8::from(i == 0))).collect();
        assert_eq!(brier(&samples(&ten)).unwrap(), 0.09);
        // (0.2^2 + 0.4^2) / 2
        assert!((brier(&samples(&[(0.8, 1), (0.4, 0)])).unwrap() - 0.10).abs() < 1e-15);
        assert_eq!(brier(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn brier_rejects_invalid_samples() {
        assert!(matches!(
            brier(&samples(&[(1.2, 1)])),
            Err(MetricsError::ConfidenceOutOfRange { .. })
        ));
        assert!(matches!(brier(&samples(&[(0.5, 2)])), Err(MetricsError::BadOutcome { .. })));
    }

    #[test]
    fn skill_examples() {
        let base: Vec<_> = (0..8).map(|i| (0.25, u8::from(i < 2))).collect();
        assert!(skill_score(&samples(&base)).unwrap().abs() < 1e-15);
        assert_eq!(skill_score(&samples(&[(1.0, 1), (0.0, 0)])).unwrap(), 1.0);
        let ss = skill_from_rates(0.19, 0.39).unwrap();
        assert!((ss - (-1.53)).abs() < 0.02, "{ss}");
        assert!(matches!(
            skill_score(&samples(&[(0.3, 1), (0.9, 1)])),
            Err(MetricsError::DegenerateBaseRate { .. })
        ));
    }

    #[test]
    fn ece_hand_case() {
        let s = samples(&[(0.65, 1), (0.65, 0), (0.95, 1), (0.95, 1)]);
        let (e, bins) = ece(&s, 10).unwrap();
        assert!((e - 0.10).abs() < 1e-12, "{e}");
        assert_eq!(bins[6].count, 2);
        assert_eq!(bins[9].count, 2);
    }

    #[test]
    fn ece_perfect_and_constant_predictors() {
        let (e, _) = ece(&samples(&[(1.0, 1), (1.0, 1)]), 10).unwrap();
        assert_eq!(e, 0.0);
        let unskilled: Vec<_> = (0..100).map(|i| (0.3, u8::from(i % 10 < 3))).collect();
        let (e, _) = ece(&samples(&unskilled), 10).unwrap();
        assert!(e < 1e-12, "{e}");
    }

    #[test]
    fn bins_partition_and_high_confidence() {
        let uniform: Vec<_> = (0..=100).map(|i| (i as f64 / 100.0, (i % 2) as u8)).collect();
        let bins = reliability_bins(&samples(&uniform), 10).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 101);
        // 1.0 lands in the closed last bin
        assert_eq!(bins[9].count, 11);
        for b in bins.iter().filter(|b| b.count > 0) {
            assert!(b.lo < b.hi);
            assert!(b.mean_confidence >= b.lo && b.mean_confidence <= b.hi);
        }

        let high = samples(&[(0.9, 1), (0.93, 0), (1.0, 1)]);
        let bins = reliability_bins(&high, 10).unwrap();
        assert_eq!(bins.iter().filter(|b| b.count == 0).count(), 9);
        assert!(reliability_bins(&high, 0).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&x, &[2.0; 4]), Err(MetricsError::ConstantInput));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    fn arb_samples() -> impl Strategy<Value = Vec<LabeledSample>> {
        proptest::collection::vec((0.0f64..=1.0, 0u8..=1), 1..80).prop_map(|v| samples(&v))
    }

    proptest! {
        #[test]
        fn constant_predictor_decomposition(
            outcomes in proptest::collection::vec(0u8..=1, 1..80),
            c in 0.0f64..=1.0,
        ) {
            let s: Vec<_> = outcomes.iter().map(|&o| (c, o)).collect();
            let s = samples(&s);
            let p = success_rate(&s).unwrap();
            let expected = p * (1.0 - p) + (c - p) * (c - p);
            prop_assert!((brier(&s).unwrap() - expected).abs() < 1e-12);
        }

        #[test]
        fn one_bin_ece_is_mean_gap(s in arb_samples()) {
            let (e, _) = ece(&s, 1).unwrap();
            let conf = s.iter().map(|x| x.confidence).sum::<f64>() / s.len() as f64;
            let gap = (conf - success_rate(&s).unwrap()).abs();
            prop_assert!((e - gap).abs() < 1e-12);
        }

        #[test]
        fn report_ranges_and_order_invariance(s in arb_samples(), n_bins in 1usize..20) {
            let r = calibration_report(&s, n_bins).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.brier));
            prop_assert!((0.0..=0.25).contains(&r.ref_brier));
            prop_assert!((0.0..=1.0).contains(&r.ece));
            if let Some(skill) = r.skill {
                prop_assert!(skill <= 1.0);
                let mut rev = s.clone();
                rev.reverse();
                prop_assert!((skill_score(&rev).unwrap() - skill).abs() < 1e-12);
            }
            let mse = neumaier_sum(squared_errors(&s)) / s.len() as f64;
            prop_assert_eq!(mse, r.brier);
        }

        #[test]
        fn spearman_bounded(v in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..40)) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(rho) = spearman(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&rho));
            }
        }
    }
}
