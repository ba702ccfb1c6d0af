//! Platt rescaling under repository-grouped cross-validation, and per-fold
//! tuning of the token cutoff.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{aggregate, ConfidenceError, ConfidenceSpec, Cutoff};
use crate::corpus::SummaryRecord;
use crate::correctness::{label, CorrectnessError, CorrectnessRule};
use crate::metrics::{skill_score, LabeledSample};

#[derive(Debug, Error, PartialEq)]
pub enum RescaleError {
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("{repos} distinct repositories cannot fill {k} folds")]
    TooFewRepos { repos: usize, k: usize },
    #[error("repository {0:?} has no fold assignment")]
    UnassignedRepo(String),
    #[error("fold {0} has no training samples")]
    EmptyTraining(usize),
    #[error("no samples to rescale")]
    NoSamples,
    #[error("cutoff grid is empty")]
    EmptyGrid,
    #[error("unknown feature space {0:?} (expected raw or logit)")]
    BadFeatureSpace(String),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Correctness(#[from] CorrectnessError),
}

/// Default L2 penalty on (slope, intercept).
pub const DEFAULT_L2: f64 = 1e-6;
pub const DEFAULT_FOLDS: usize = 5;
/// Clamp applied to confidences before taking log-odds.
pub const LOGIT_EPS: f64 = 1e-6;

const MAX_NEWTON_ITERS: usize = 100;
const GRADIENT_TOL: f64 = 1e-10;
const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Fit on the confidence itself.
    #[serde(rename = "raw")]
    RawConfidence,
    /// Fit on `ln(c / (1 - c))`.
    #[default]
    #[serde(rename = "logit")]
    LogitConfidence,
}

impl FeatureSpace {
    pub fn feature(self, confidence: f64) -> f64 {
        match self {
            FeatureSpace::RawConfidence => confidence,
            FeatureSpace::LogitConfidence => {
                let c = confidence.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
                (c / (1.0 - c)).ln()
            }
        }
    }
}

impl FromStr for FeatureSpace {
    type Err = RescaleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(FeatureSpace::RawConfidence),
            "logit" => Ok(FeatureSpace::LogitConfidence),
            other => Err(RescaleError::BadFeatureSpace(other.to_string())),
        }
    }
}

impl fmt::Display for FeatureSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSpace::RawConfidence => "raw",
            FeatureSpace::LogitConfidence => "logit",
        })
    }
}

/// `sigmoid(slope * feature(c) + intercept)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlattModel {
    pub slope: f64,
    pub intercept: f64,
    pub feature_space: FeatureSpace,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized negative log-likelihood at the returned parameters.
    pub neg_log_likelihood: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct Objective<'a> {
    x: &'a [f64],
    y: &'a [f64],
    l2: f64,
}

impl Objective<'_> {
    fn value(&self, a: f64, b: f64) -> f64 {
        let nll: f64 = self
            .x
            .iter()
            .zip(self.y)
            .map(|(&x, &y)| {
                let z = a * x + b;
                softplus(z) - y * z
            })
            .sum();
        nll + 0.5 * self.l2 * (a * a + b * b)
    }

    /// Gradient and Hessian (g_a, g_b, h_aa, h_ab, h_bb).
    fn derivatives(&self, a: f64, b: f64) -> [f64; 5] {
        let mut d = [self.l2 * a, self.l2 * b, self.l2, 0.0, self.l2];
        for (&x, &y) in self.x.iter().zip(self.y) {
            let p = sigmoid(a * x + b);
            let r = p - y;
            let w = p * (1.0 - p);
            d[0] += r * x;
            d[1] += r;
            d[2] += w * x * x;
            d[3] += w * x;
            d[4] += w;
        }
        d
    }
}

/// Fits a Platt model by damped Newton iterations on the L2-penalized
/// Bernoulli log-likelihood.
///
/// Stops when the gradient norm per sample drops below 1e-10, after 100 iterations, or
/// when a backtracking line search can no longer decrease the objective.
pub fn fit_platt(train: &[LabeledSample], feature_space: FeatureSpace, l2: f64) -> PlattModel {
    let x: Vec<f64> = train.iter().map(|s| feature_space.feature(s.confidence)).collect();
    let y: Vec<f64> = train.iter().map(|s| f64::from(s.outcome)).collect();
    let objective = Objective { x: &x, y: &y, l2 };
    // tolerance applies to the per-sample gradient
    let scale = train.len().max(1) as f64;

    let positives = y.iter().sum::<f64>();
    let negatives = y.len() as f64 - positives;
    let (mut a, mut b) = (0.0, ((positives + 1.0) / (negatives + 1.0)).ln());
    let mut value = objective.value(a, b);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MAX_NEWTON_ITERS {
        let [ga, gb, haa, hab, hbb] = objective.derivatives(a, b);
        if ga.hypot(gb) / scale < GRADIENT_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let mut det = haa * hbb - hab * hab;
        let mut ridge = 0.0;
        while det.is_nan() || det <= 0.0 {
            ridge = if ridge == 0.0 { 1e-12 } else { ridge * 10.0 };
            det = (haa + ridge) * (hbb + ridge) - hab * hab;
        }
        let da = -((hbb + ridge) * ga - hab * gb) / det;
        let db = -((haa + ridge) * gb - hab * ga) / det;
        let slope = ga * da + gb * db;

        let mut step = 1.0;
        let accepted = loop {
            let (na, nb) = (a + step * da, b + step * db);
            let nv = objective.value(na, nb);
            if nv <= value + 1e-4 * step * slope {
                break Some((na, nb, nv));
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        match accepted {
            Some((na, nb, nv)) => {
                let stalled = nv == value && na == a && nb == b;
                a = na;
                b = nb;
                value = nv;
                if stalled {
                    break;
                }
            }
            None => {
                // no further decrease is representable
                converged = ga.hypot(gb) / scale < GRADIENT_TOL.sqrt();
                break;
            }
        }
    }

    PlattModel {
        slope: a,
        intercept: b,
        feature_space,
        iterations,
        converged,
        neg_log_likelihood: value,
    }
}

impl PlattModel {
    pub fn apply(&self, confidence: f64) -> f64 {
        sigmoid(self.slope * self.feature_space.feature(confidence) + self.intercept)
    }
}

/// Free-function form of [`PlattModel::apply`].
pub fn apply(model: &PlattModel, confidence: f64) -> f64 {
    model.apply(confidence)
}

/// Repository-to-fold map; all records of a repository share one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub repo_to_fold: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, repo: &str) -> Result<usize, RescaleError> {
        self.repo_to_fold
            .get(repo)
            .copied()
            .ok_or_else(|| RescaleError::UnassignedRepo(repo.to_string()))
    }
}

/// Shuffles the distinct repositories with a seeded ChaCha8 stream, then deals
/// each to the fold currently holding the fewest records (lowest index on
/// ties). `repos` yields one entry per record.
pub fn assign_folds<'a>(
    repos: impl IntoIterator<Item = &'a str>,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, RescaleError> {
    if k < 2 {
        return Err(RescaleError::TooFewFolds(k));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for repo in repos {
        *sizes.entry(repo).or_default() += 1;
    }
    if sizes.len() < k {
        return Err(RescaleError::TooFewRepos {
            repos: sizes.len(),
            k,
        });
    }
    let mut order: Vec<(&str, usize)> = sizes.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut load = vec![0usize; k];
    let mut repo_to_fold = BTreeMap::new();
    for (repo, size) in order {
        let fold = (0..k).min_by_key(|&f| (load[f], f)).expect("k >= 2");
        load[fold] += size;
        repo_to_fold.insert(repo.to_string(), fold);
    }
    Ok(FoldAssignment {
        k,
        seed,
        repo_to_fold,
    })
}

pub fn assign_record_folds(
    records: &[SummaryRecord],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, RescaleError> {
    assign_folds(records.iter().map(|r| r.repo.as_str()), k, seed)
}

/// An out-of-fold rescaled sample and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaledSample {
    #[serde(flatten)]
    pub sample: LabeledSample,
    pub raw_confidence: f64,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFit {
    pub fold: usize,
    pub model: PlattModel,
    pub n_train: usize,
    pub n_test: usize,
    /// Cutoff applied to this fold, when tuned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<Cutoff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValOutput {
    /// Sorted by sample id.
    pub samples: Vec<RescaledSample>,
    pub folds: Vec<FoldFit>,
}

impl CrossValOutput {
    pub fn labeled(&self) -> Vec<LabeledSample> {
        self.samples.iter().map(|s| s.sample.clone()).collect()
    }
}

fn sample_folds(samples: &[LabeledSample], folds: &FoldAssignment) -> Result<Vec<usize>, RescaleError> {
    samples.iter().map(|s| folds.fold_of(&s.repo)).collect()
}

fn check_training(fold_of: &[usize], k: usize) -> Result<(), RescaleError> {
    let mut counts = vec![0usize; k];
    for &f in fold_of {
        counts[f] += 1;
    }
    let total = fold_of.len();
    match (0..k).find(|&f| counts[f] == total) {
        Some(f) => Err(RescaleError::EmptyTraining(f)),
        None => Ok(()),
    }
}

fn split<'a>(
    samples: &'a [LabeledSample],
    fold_of: &[usize],
    fold: usize,
) -> (Vec<LabeledSample>, Vec<&'a LabeledSample>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, &f) in samples.iter().zip(fold_of) {
        if f == fold {
            test.push(s);
        } else {
            train.push(s.clone());
        }
    }
    (train, test)
}

fn rescaled(model: &PlattModel, s: &LabeledSample, fold: usize) -> RescaledSample {
    RescaledSample {
        sample: LabeledSample {
            confidence: model.apply(s.confidence),
            ..s.clone()
        },
        raw_confidence: s.confidence,
        fold,
    }
}

/// Gives every sample one rescaled confidence from a model fit on the other
/// folds only.
pub fn crossval_rescale(
    samples: &[LabeledSample],
    folds: &FoldAssignment,
    feature_space: FeatureSpace,
    l2: f64,
) -> Result<CrossValOutput, RescaleError> {
    if samples.is_empty() {
        return Err(RescaleError::NoSamples);
    }
    let fold_of = sample_folds(samples, folds)?;
    check_training(&fold_of, folds.k)?;

    let mut out = Vec::with_capacity(samples.len());
    let mut fits = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let (train, test) = split(samples, &fold_of, fold);
        let model = fit_platt(&train, feature_space, l2);
        out.extend(test.iter().map(|s| rescaled(&model, s, fold)));
        fits.push(FoldFit {
            fold,
            model,
            n_train: train.len(),
            n_test: test.len(),
            cutoff: None,
        });
    }
    out.sort_by(|a, b| a.sample.id.cmp(&b.sample.id));
    Ok(CrossValOutput {
        samples: out,
        folds: fits,
    })
}

/// Labels records under `rule` with confidences from `spec`.
pub fn labeled_samples(
    records: &[SummaryRecord],
    rule: &CorrectnessRule,
    spec: &ConfidenceSpec,
) -> Result<Vec<LabeledSample>, RescaleError> {
    records
        .iter()
        .map(|r| {
            Ok(LabeledSample::new(
                r.id.clone(),
                r.repo.clone(),
                aggregate(&r.token_probs, spec)?,
                label(r, rule)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffChoice {
    pub per_fold: BTreeMap<usize, Cutoff>,
    pub grid: Vec<Cutoff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutput {
    pub choice: CutoffChoice,
    pub crossval: CrossValOutput,
}

/// Skill of a rescaler fit and evaluated on the same samples.
fn in_sample_skill(train: &[LabeledSample], feature_space: FeatureSpace, l2: f64) -> f64 {
    let model = fit_platt(train, feature_space, l2);
    let rescaled: Vec<LabeledSample> = train
        .iter()
        .map(|s| LabeledSample {
            confidence: model.apply(s.confidence),
            ..s.clone()
        })
        .collect();
    skill_score(&rescaled).unwrap_or(f64::NEG_INFINITY)
}

/// Per fold, picks the cutoff whose Platt-rescaled training skill is highest
/// (ties to the larger cutoff), then rescales the held-out fold at that
/// cutoff with a model fit on all training folds.
pub fn tune_cutoff(
    records: &[SummaryRecord],
    rule: &CorrectnessRule,
    folds: &FoldAssignment,
    spec_base: &ConfidenceSpec,
    t_grid: &[Cutoff],
    feature_space: FeatureSpace,
    l2: f64,
) -> Result<TuneOutput, RescaleError> {
    if records.is_empty() {
        return Err(RescaleError::NoSamples);
    }
    let mut grid = t_grid.to_vec();
    grid.sort();
    grid.dedup();
    if grid.is_empty() {
        return Err(RescaleError::EmptyGrid);
    }
    let per_candidate: Vec<Vec<LabeledSample>> = grid
        .iter()
        .map(|&t| labeled_samples(records, rule, &spec_base.with_cutoff(t)))
        .collect::<Result<_, _>>()?;
    let fold_of = sample_folds(&per_candidate[0], folds)?;
    check_training(&fold_of, folds.k)?;

    let mut out = Vec::with_capacity(records.len());
    let mut fits = Vec::with_capacity(folds.k);
    let mut per_fold = BTreeMap::new();
    for fold in 0..folds.k {
        let mut best: Option<(f64, usize)> = None;
        for (idx, samples) in per_candidate.iter().enumerate() {
            let (train, _) = split(samples, &fold_of, fold);
            let skill = in_sample_skill(&train, feature_space, l2);
            if best.is_none_or(|(s, _)| skill >= s) {
                best = Some((skill, idx));
            }
        }
        let (_, idx) = best.expect("grid is non-empty");
        let (train, test) = split(&per_candidate[idx], &fold_of, fold);
        let model = fit_platt(&train, feature_space, l2);
        out.extend(test.iter().map(|s| rescaled(&model, s, fold)));
        per_fold.insert(fold, grid[idx]);
        fits.push(FoldFit {
            fold,
            model,
            n_train: train.len(),
            n_test: test.len(),
            cutoff: Some(grid[idx]),
        });
    }
    out.sort_by(|a, b| a.sample.id.cmp(&b.sample.id));
    Ok(TuneOutput {
        choice: CutoffChoice { per_fold, grid },
        crossval: CrossValOutput {
            samples: out,
            folds: fits,
        },
    })
}

/// Record count per fold, for reporting.
pub fn fold_sizes(records: &[SummaryRecord], folds: &FoldAssignment) -> Vec<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for r in records {
        if let Some(&f) = folds.repo_to_fold.get(&r.repo) {
            *counts.entry(f).or_default() += 1;
        }
    }
    (0..folds.k).map(|f| counts.get(&f).copied().unwrap_or(0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::metrics::brier;
    use rand::Rng;

    fn bernoulli_stream(n: usize, seed: u64, truth: impl Fn(f64) -> f64) -> Vec<LabeledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c: f64 = rng.random_range(0.001..0.999);
                let y = u8::from(rng.random::<f64>() < truth(c));
                LabeledSample::new(format!("s{i:06}"), format!("repo{}", i % 50), c, y)
            })
            .collect()
    }

    #[test]
    fn apply_examples() {
        let model = PlattModel {
            slope: 1.0,
            intercept: 0.0,
            feature_space: FeatureSpace::RawConfidence,
            iterations: 0,
            converged: true,
            neg_log_likelihood: 0.0,
        };
        assert!((model.apply(0.5) - 0.622_459_331_201_854_6).abs() < 1e-15);
        let flat = PlattModel {
            slope: 0.0,
            intercept: -1.3,
            ..model.clone()
        };
        assert_eq!(flat.apply(0.1), flat.apply(0.9));
        assert!(model.apply(0.2) < model.apply(0.3));
    }

    #[test]
    fn logit_feature_is_clamped() {
        let f = FeatureSpace::LogitConfidence;
        assert!(f.feature(0.0).is_finite());
        assert!(f.feature(1.0).is_finite());
        assert_eq!(f.feature(0.5), 0.0);
    }

    #[test]
    fn calibrated_input_is_nearly_unchanged() {
        let train = bernoulli_stream(10_000, 7, |c| c);
        // the identity is exactly representable in logit space
        let model = fit_platt(&train, FeatureSpace::LogitConfidence, DEFAULT_L2);
        for i in 1..100 {
            let c = i as f64 / 100.0;
            assert!((model.apply(c) - c).abs() < 0.05, "c={c} -> {}", model.apply(c));
        }
        let raw_brier = brier(&train).unwrap();
        for fs in [FeatureSpace::RawConfidence, FeatureSpace::LogitConfidence] {
            let m = fit_platt(&train, fs, DEFAULT_L2);
            let fitted: Vec<_> = train
                .iter()
                .map(|s| LabeledSample::new(s.id.clone(), "r", m.apply(s.confidence), s.outcome))
                .collect();
            assert!((brier(&fitted).unwrap() - raw_brier).abs() < 0.005, "{fs}");
        }
    }

    #[test]
    fn all_negative_outcomes_stay_finite() {
        let train: Vec<_> = (0..200)
            .map(|i| LabeledSample::new(format!("{i}"), "r", (i as f64 + 0.5) / 200.0, 0))
            .collect();
        for fs in [FeatureSpace::RawConfidence, FeatureSpace::LogitConfidence] {
            let m = fit_platt(&train, fs, DEFAULT_L2);
            assert!(m.slope.is_finite() && m.intercept.is_finite());
            assert!(m.intercept < -5.0, "{m:?}");
            for c in [0.01, 0.5, 0.99] {
                assert!(m.apply(c) < 0.01, "{fs}: {}", m.apply(c));
            }
        }
    }

    #[test]
    fn single_support_point_recovers_empirical_rate() {
        // confidence 0.9 everywhere, 30% correct
        let train: Vec<_> = (0..1000)
            .map(|i| LabeledSample::new(format!("{i}"), "r", 0.9, u8::from(i % 10 < 3)))
            .collect();
        for fs in [FeatureSpace::RawConfidence, FeatureSpace::LogitConfidence] {
            let m = fit_platt(&train, fs, DEFAULT_L2);
            assert!((m.apply(0.9) - 0.3).abs() < 0.02, "{fs}: {}", m.apply(0.9));
        }
    }

    #[test]
    fn recovers_planted_parameters() {
        let (a, b) = (1.7, -0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let train: Vec<_> = (0..50_000)
            .map(|i| {
                let c: f64 = rng.random_range(0.01..0.99);
                let p = sigmoid(a * FeatureSpace::LogitConfidence.feature(c) + b);
                LabeledSample::new(format!("{i}"), "r", c, u8::from(rng.random::<f64>() < p))
            })
            .collect();
        let m = fit_platt(&train, FeatureSpace::LogitConfidence, DEFAULT_L2);
        assert!(m.converged);
        assert!((m.slope - a).abs() < 0.1, "{m:?}");
        assert!((m.intercept - b).abs() < 0.1, "{m:?}");
    }

    #[test]
    fn fold_assignment_examples() {
        let repos: Vec<String> = (0..10).flat_map(|r| vec![format!("r{r}"); 4]).collect();
        let folds = assign_folds(repos.iter().map(String::as_str), 5, 3).unwrap();
        let mut per_fold = [0usize; 5];
        for &f in folds.repo_to_fold.values() {
            per_fold[f] += 1;
        }
        assert_eq!(per_fold, [2; 5]);
        assert_eq!(folds.repo_to_fold.len(), 10);
        let again = assign_folds(repos.iter().map(String::as_str), 5, 3).unwrap();
        assert_eq!(folds, again);

        assert_eq!(
            assign_folds(["a", "b", "c"], 5, 0),
            Err(RescaleError::TooFewRepos { repos: 3, k: 5 })
        );
        assert_eq!(assign_folds(["a", "b"], 1, 0), Err(RescaleError::TooFewFolds(1)));
    }

    #[test]
    fn crossval_bookkeeping() {
        let samples = bernoulli_stream(5_000, 11, |c| c * c);
        let folds = assign_folds(samples.iter().map(|s| s.repo.as_str()), 5, 0).unwrap();
        let out = crossval_rescale(&samples, &folds, FeatureSpace::LogitConfidence, DEFAULT_L2).unwrap();
        assert_eq!(out.samples.len(), 5_000);
        assert_eq!(out.folds.iter().map(|f| f.n_test).sum::<usize>(), 5_000);
        for s in &out.samples {
            // the model that rescaled s was trained without s's repository
            assert_eq!(folds.fold_of(&s.sample.repo).unwrap(), s.fold);
            let fit = &out.folds[s.fold];
            assert_eq!(fit.n_train, 5_000 - fit.n_test);
            assert!((fit.model.apply(s.raw_confidence) - s.sample.confidence).abs() < 1e-15);
        }
        let ids: Vec<_> = out.samples.iter().map(|s| &s.sample.id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn crossval_errors() {
        let samples = vec![LabeledSample::new("a", "r1", 0.5, 1), LabeledSample::new("b", "r2", 0.5, 0)];
        let mut folds = assign_folds(["r1", "r2"], 2, 0).unwrap();
        assert!(crossval_rescale(&[], &folds, FeatureSpace::RawConfidence, DEFAULT_L2).is_err());
        folds.repo_to_fold.insert("r2".into(), folds.repo_to_fold["r1"]);
        assert!(matches!(
            crossval_rescale(&samples, &folds, FeatureSpace::RawConfidence, DEFAULT_L2),
            Err(RescaleError::EmptyTraining(_))
        ));
        folds.repo_to_fold.remove("r2");
        assert!(matches!(
            crossval_rescale(&samples, &folds, FeatureSpace::RawConfidence, DEFAULT_L2),
            Err(RescaleError::UnassignedRepo(_))
        ));
    }

    fn short_record(i: usize, rng: &mut ChaCha8Rng) -> SummaryRecord {
        let len = rng.random_range(1..=4);
        let probs: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
        let sim = rng.random_range(0.0..1.0);
        SummaryRecord {
            id: format!("x{i:04}"),
            repo: format!("repo{}", i % 12),
            tags: BTreeMap::new(),
            token_probs: probs,
            similarity: [("bertscore".to_string(), sim)].into_iter().collect(),
            summary_text: None,
            reference_text: None,
        }
    }

    #[test]
    fn cutoff_beyond_every_length_matches_unbounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let records: Vec<_> = (0..600).map(|i| short_record(i, &mut rng)).collect();
        let rule = CorrectnessRule::new("bertscore", 0.4);
        let folds = assign_record_folds(&records, 5, 0).unwrap();
        let spec = ConfidenceSpec::default();
        let grid: Vec<_> = (5..=9).filter_map(Cutoff::first).collect();
        let tuned = tune_cutoff(&records, &rule, &folds, &spec, &grid, FeatureSpace::LogitConfidence, DEFAULT_L2).unwrap();
        assert!(tuned.choice.per_fold.values().all(|&t| t == Cutoff::first(9).unwrap()));

        let samples = labeled_samples(&records, &rule, &spec).unwrap();
        let plain = crossval_rescale(&samples, &folds, FeatureSpace::LogitConfidence, DEFAULT_L2).unwrap();
        assert_eq!(tuned.crossval.samples, plain.samples);
        assert!(tune_cutoff(&records, &rule, &folds, &spec, &[], FeatureSpace::LogitConfidence, DEFAULT_L2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn apply_is_monotone_for_positive_slope(
            slope in 0.01f64..10.0,
            intercept in -5.0f64..5.0,
            x1 in 0.0f64..1.0,
            x2 in 0.0f64..1.0,
        ) {
            let m = PlattModel {
                slope, intercept,
                feature_space: FeatureSpace::RawConfidence,
                iterations: 0, converged: true, neg_log_likelihood: 0.0,
            };
            prop_assume!(x1 < x2);
            prop_assert!(m.apply(x1) <= m.apply(x2));
            let out = m.apply(x1);
            prop_assert!(out > 0.0 && out < 1.0);
        }

        #[test]
        fn fit_is_finite_under_any_labels(
            v in proptest::collection::vec((0.0f64..=1.0, 0u8..=1), 1..60),
            logit in any::<bool>(),
        ) {
            let train: Vec<_> = v.iter().enumerate()
                .map(|(i, &(c, y))| LabeledSample::new(format!("{i}"), "r", c, y))
                .collect();
            let fs = if logit { FeatureSpace::LogitConfidence } else { FeatureSpace::RawConfidence };
            let m = fit_platt(&train, fs, DEFAULT_L2);
            prop_assert!(m.slope.is_finite() && m.intercept.is_finite());
            prop_assert!(m.neg_log_likelihood.is_finite());
        }

        #[test]
        fn folds_partition_repos(n_repos in 5usize..40, k in 2usize..6, seed in any::<u64>()) {
            let repos: Vec<String> = (0..n_repos * 3).map(|i| format!("r{}", i % n_repos)).collect();
            let folds = assign_folds(repos.iter().map(String::as_str), k, seed).unwrap();
            prop_assert_eq!(folds.repo_to_fold.len(), n_repos);
            prop_assert!(folds.repo_to_fold.values().all(|&f| f < k));
            for f in 0..k {
                prop_assert!(folds.repo_to_fold.values().any(|&g| g == f));
            }
        }
    }
}
