//! Binary correctness from thresholded similarity, threshold selection against
//! human ratings, and ROC analysis.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{RatingRecord, SummaryRecord};

#[derive(Debug, Error, PartialEq)]
pub enum CorrectnessError {
    #[error("record {id:?} has no similarity value for metric {metric:?}")]
    MissingMetric { id: String, metric: String },
    #[error("no (metric, threshold) pair satisfies the {objective} constraint")]
    Infeasible { objective: Objective },
    #[error("rating corpus is empty")]
    EmptyCorpus,
    #[error("no metrics given to search")]
    NoMetrics,
    #[error("ROC needs both classes, found {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("unknown objective {0:?} (expected high-precision, high-recall or max-f1)")]
    BadObjective(String),
}

/// A summary is correct iff `similarity[metric] >= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessRule {
    pub metric: String,
    pub threshold: f64,
}

impl CorrectnessRule {
    pub fn new(metric: impl Into<String>, threshold: f64) -> Self {
        Self {
            metric: metric.into(),
            threshold,
        }
    }

    pub fn accepts(&self, value: f64) -> bool {
        value >= self.threshold
    }
}

impl fmt::Display for CorrectnessRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} >= {}", self.metric, self.threshold)
    }
}

/// Mean human rating of at least 3 ("Agree").
pub fn human_similar(ratings: &[u8]) -> bool {
    // sum >= 3n keeps the boundary exact
    let sum: u32 = ratings.iter().map(|&r| u32::from(r)).sum();
    !ratings.is_empty() && sum >= 3 * ratings.len() as u32
}

pub fn label(record: &SummaryRecord, rule: &CorrectnessRule) -> Result<u8, CorrectnessError> {
    let value = record
        .similarity
        .get(&rule.metric)
        .ok_or_else(|| CorrectnessError::MissingMetric {
            id: record.id.clone(),
            metric: rule.metric.clone(),
        })?;
    Ok(u8::from(rule.accepts(*value)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Support {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: Support,
}

impl RuleQuality {
    /// Precision, recall and F1 with 0/0 taken as 0.
    pub fn from_support(support: Support) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(support.tp, support.tp + support.fp);
        let recall = ratio(support.tp, support.tp + support.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            support,
        }
    }
}

fn metric_value(record: &RatingRecord, metric: &str) -> Result<f64, CorrectnessError> {
    record
        .metric_values
        .get(metric)
        .copied()
        .ok_or_else(|| CorrectnessError::MissingMetric {
            id: record.id.clone(),
            metric: metric.to_string(),
        })
}

/// (metric value, human-similar) for every record.
fn scored(ratings: &[RatingRecord], metric: &str) -> Result<Vec<(f64, bool)>, CorrectnessError> {
    ratings
        .iter()
        .map(|r| Ok((metric_value(r, metric)?, human_similar(&r.ratings))))
        .collect()
}

fn quality_at(scored: &[(f64, bool)], threshold: f64) -> RuleQuality {
    let mut support = Support::default();
    for &(value, truth) in scored {
        match (value >= threshold, truth) {
            (true, true) => support.tp += 1,
            (true, false) => support.fp += 1,
            (false, false) => support.tn += 1,
            (false, true) => support.fn_ += 1,
        }
    }
    RuleQuality::from_support(support)
}

/// Confusion counts of `rule` against the human-similar labels.
pub fn evaluate_rule(
    ratings: &[RatingRecord],
    rule: &CorrectnessRule,
) -> Result<RuleQuality, CorrectnessError> {
    Ok(quality_at(&scored(ratings, &rule.metric)?, rule.threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Highest recall among rules with precision > 0.9.
    #[serde(alias = "high-precision")]
    HighPrecision,
    /// Highest precision among rules with recall > 0.9.
    #[serde(alias = "high-recall")]
    HighRecall,
    #[serde(alias = "max-f1")]
    MaxF1,
}

/// Precision or recall a constrained objective must strictly exceed.
pub const CONSTRAINT_LEVEL: f64 = 0.9;

impl Objective {
    /// Objective value, or `None` when the rule violates the constraint.
    fn score(self, q: &RuleQuality) -> Option<f64> {
        match self {
            Objective::HighPrecision => (q.precision > CONSTRAINT_LEVEL).then_some(q.recall),
            Objective::HighRecall => (q.recall > CONSTRAINT_LEVEL).then_some(q.precision),
            Objective::MaxF1 => Some(q.f1),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::HighPrecision => "high-precision",
            Objective::HighRecall => "high-recall",
            Objective::MaxF1 => "max-f1",
        })
    }
}

impl FromStr for Objective {
    type Err = CorrectnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "high-precision" => Ok(Objective::HighPrecision),
            "high-recall" => Ok(Objective::HighRecall),
            "max-f1" => Ok(Objective::MaxF1),
            _ => Err(CorrectnessError::BadObjective(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub objective: Objective,
    pub rule: CorrectnessRule,
    pub quality: RuleQuality,
}

/// Grid step of the threshold search, in hundredths.
const GRID_SCALE: f64 = 100.0;

/// Thresholds `k / 100` from the largest grid point not above `min` up to the
/// largest grid point not above `max`.
pub fn threshold_grid(min: f64, max: f64) -> Vec<f64> {
    let at = |k: i64| k as f64 / GRID_SCALE;
    let floor_index = |v: f64| {
        let mut k = (v * GRID_SCALE).floor() as i64;
        while at(k + 1) <= v {
            k += 1;
        }
        while at(k) > v {
            k -= 1;
        }
        k
    };
    (floor_index(min)..=floor_index(max)).map(at).collect()
}

/// Exhaustive search over metrics and 0.01-spaced thresholds.
///
/// Ties on the objective go to the higher F1 (so a constrained objective
/// also maximizes its constrained quantity), then to the higher threshold,
/// then to the lexicographically smaller metric name.
pub fn grid_search(
    ratings: &[RatingRecord],
    metrics: &[&str],
    objective: Objective,
) -> Result<Selection, CorrectnessError> {
    if ratings.is_empty() {
        return Err(CorrectnessError::EmptyCorpus);
    }
    if metrics.is_empty() {
        return Err(CorrectnessError::NoMetrics);
    }
    let mut best: Option<(f64, Selection)> = None;
    for &metric in metrics {
        let scored = scored(ratings, metric)?;
        let (min, max) = scored.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(v, _)| {
            (lo.min(v), hi.max(v))
        });
        for threshold in threshold_grid(min, max) {
            let quality = quality_at(&scored, threshold);
            let Some(value) = objective.score(&quality) else {
                continue;
            };
            let better = match &best {
                None => true,
                Some((best_value, sel)) => value
                    .total_cmp(best_value)
                    .then(quality.f1.total_cmp(&sel.quality.f1))
                    .then(threshold.total_cmp(&sel.rule.threshold))
                    .then_with(|| sel.rule.metric.as_str().cmp(metric))
                    == Ordering::Greater,
            };
            if better {
                best = Some((
                    value,
                    Selection {
                        objective,
                        rule: CorrectnessRule::new(metric, threshold),
                        quality,
                    },
                ));
            }
        }
    }
    best.map(|(_, sel)| sel)
        .ok_or(CorrectnessError::Infeasible { objective })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Score threshold producing this point; `None` for the origin.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over every distinct score, with tied scores entering together.
pub fn roc_from_scores(scored: &[(f64, bool)]) -> Result<RocCurve, CorrectnessError> {
    if let Some(&(v, _)) = scored.iter().find(|(v, _)| !v.is_finite()) {
        return Err(CorrectnessError::NonFinite(v));
    }
    let positives = scored.iter().filter(|(_, y)| *y).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CorrectnessError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        threshold: None,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points[points.len() - 1];
        let point = RocPoint {
            threshold: Some(threshold),
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        };
        auc += (point.fpr - prev.fpr) * (point.tpr + prev.tpr) / 2.0;
        points.push(point);
    }
    Ok(RocCurve { points, auc })
}

/// ROC of `metric` as a detector of human-similar summaries.
pub fn roc(ratings: &[RatingRecord], metric: &str) -> Result<RocCurve, CorrectnessError> {
    roc_from_scores(&scored(ratings, metric)?)
}
