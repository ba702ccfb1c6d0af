//! Seeded synthetic corpora with known ground truth.
//!
//! Every draw comes from one `ChaCha8Rng` seeded with `spec.seed`, consumed in
//! record order, so a spec reproduces the same corpus byte for byte.
//!
//! Each record gets a signal confidence `c`, drawn uniformly from
//! `confidence_range`. Its informative tokens are built so that their
//! geometric mean is exactly `c`. These are the first `after` tokens when
//! position inflation is on, and every token otherwise. Inflated tail tokens
//! are drawn uniformly from `[floor, 1]`, independent of the outcome. The
//! outcome is Bernoulli(g(c)) for the configured calibration map g. The
//! similarity under `metric` is at least `threshold` exactly when the outcome
//! is 1.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, RatingRecord, SummaryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationMap {
    Identity,
    /// `g(c) = c^gamma`, with `gamma > 1` for overconfidence.
    Overconfident { gamma: f64 },
    Constant { q: f64 },
}

impl CalibrationMap {
    pub fn success_probability(self, confidence: f64) -> f64 {
        match self {
            CalibrationMap::Identity => confidence,
            CalibrationMap::Overconfident { gamma } => confidence.powf(gamma),
            CalibrationMap::Constant { q } => q,
        }
        .clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDistribution {
    /// Inclusive bounds.
    Uniform { min: usize, max: usize },
    /// `1 + Geometric(1 / mean)`, so lengths average `mean`.
    Geometric { mean: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionInflation {
    /// Tokens at positions `1..=after` carry the signal.
    pub after: usize,
    /// Later tokens are uniform on `[floor, 1]`.
    pub floor: f64,
}

fn default_confidence_range() -> (f64, f64) {
    (0.05, 0.99)
}
fn default_log_spread() -> f64 {
    0.3
}
fn default_metric() -> String {
    "bertscore".into()
}
fn default_threshold() -> f64 {
    0.49
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n: usize,
    pub seed: u64,
    pub repo_count: usize,
    pub token_length_distribution: LengthDistribution,
    pub calibration_map: CalibrationMap,
    #[serde(default)]
    pub position_inflation: Option<PositionInflation>,
    #[serde(default = "default_confidence_range")]
    pub confidence_range: (f64, f64),
    /// Standard deviation of per-token log-probability jitter around `ln c`.
    #[serde(default = "default_log_spread")]
    pub log_spread: f64,
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Also emit a human-rating corpus with a planted threshold.
    #[serde(default)]
    pub ratings: Option<RatingSpec>,
}

impl GeneratorSpec {
    pub fn new(n: usize, seed: u64, calibration_map: CalibrationMap) -> Self {
        Self {
            n,
            seed,
            repo_count: 50,
            token_length_distribution: LengthDistribution::Uniform { min: 3, max: 30 },
            calibration_map,
            position_inflation: None,
            confidence_range: default_confidence_range(),
            log_spread: default_log_spread(),
            metric: default_metric(),
            threshold: default_threshold(),
            ratings: None,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        let (lo, hi) = self.confidence_range;
        if self.n == 0 {
            return Err("n must be positive".into());
        }
        if self.repo_count == 0 {
            return Err("repo_count must be at least 1".into());
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(format!("confidence_range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(format!("threshold {} must lie in (0, 1]", self.threshold));
        }
        if !(self.log_spread >= 0.0 && self.log_spread.is_finite()) {
            return Err("log_spread must be finite and non-negative".into());
        }
        match self.token_length_distribution {
            LengthDistribution::Uniform { min, max } if min == 0 || max < min => {
                return Err(format!("length bounds ({min}, {max}) need 1 <= min <= max"));
            }
            LengthDistribution::Geometric { mean } if mean.is_nan() || mean < 1.0 => {
                return Err(format!("geometric mean length {mean} must be at least 1"));
            }
            _ => {}
        }
        match self.calibration_map {
            CalibrationMap::Overconfident { gamma } if gamma.is_nan() || gamma <= 0.0 => {
                return Err(format!("gamma {gamma} must be positive"));
            }
            CalibrationMap::Constant { q } if !(0.0..=1.0).contains(&q) => {
                return Err(format!("constant success probability {q} outside [0, 1]"));
            }
            _ => {}
        }
        if let Some(inf) = self.position_inflation {
            if inf.after == 0 || !(inf.floor > 0.0 && inf.floor <= 1.0) {
                return Err("position_inflation needs after >= 1 and 0 < floor <= 1".into());
            }
        }
        if let Some(r) = &self.ratings {
            r.check()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub signal_confidence: f64,
    pub success_probability: f64,
    pub outcome: u8,
}

/// Sidecar describing what the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: GeneratorSpec,
    pub metric: String,
    pub threshold: f64,
    pub records: Vec<TruthRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<RatingTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTruth {
    pub metric: String,
    pub threshold: f64,
}

pub struct Generated {
    pub corpus: Corpus,
    pub truth: Truth,
    pub ratings: Option<Vec<RatingRecord>>,
}

fn draw_length(rng: &mut ChaCha8Rng, dist: LengthDistribution) -> usize {
    match dist {
        LengthDistribution::Uniform { min, max } => rng.random_range(min..=max),
        LengthDistribution::Geometric { mean } => {
            let geo = Geometric::new(1.0 / mean).expect("mean >= 1");
            1 + geo.sample(rng) as usize
        }
    }
}

/// `m` probabilities in (0, 1] whose geometric mean is `c`.
fn informative_tokens(rng: &mut ChaCha8Rng, m: usize, c: f64, spread: f64) -> Vec<f64> {
    let noise = Normal::new(0.0, spread).expect("spread is finite and non-negative");
    let mut e: Vec<f64> = (0..m).map(|_| noise.sample(rng)).collect();
    let centre = e.iter().sum::<f64>() / m as f64;
    e.iter_mut().for_each(|x| *x -= centre);
    let ln_c = c.ln();
    let top = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if ln_c + top > 0.0 {
        let shrink = -ln_c / top;
        e.iter_mut().for_each(|x| *x *= shrink);
    }
    e.into_iter().map(|x| (ln_c + x).exp().min(1.0)).collect()
}

/// Builds a corpus (and optional rating corpus) from `spec`.
///
/// Panics if `spec` fails [`GeneratorSpec::check`].
pub fn generate(spec: &GeneratorSpec) -> Generated {
    if let Err(e) = spec.check() {
        panic!("invalid generator spec: {e}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.confidence_range;
    let width = spec.repo_count.to_string().len();
    let mut records = Vec::with_capacity(spec.n);
    let mut truth_records = Vec::with_capacity(spec.n);

    for i in 0..spec.n {
        let id = format!("syn-{i:07}");
        let repo = format!("repo-{:0width$}", rng.random_range(0..spec.repo_count));
        let len = draw_length(&mut rng, spec.token_length_distribution);
        let c = if lo == hi { lo } else { rng.random_range(lo..hi) };
        let informative = spec
            .position_inflation
            .map_or(len, |inf| inf.after.min(len));
        let mut token_probs = informative_tokens(&mut rng, informative, c, spec.log_spread);
        if let Some(inf) = spec.position_inflation {
            token_probs.extend((informative..len).map(|_| 1.0 - (1.0 - inf.floor) * rng.random::<f64>()));
        }
        let success_probability = spec.calibration_map.success_probability(c);
        let outcome = u8::from(rng.random::<f64>() < success_probability);
        let u: f64 = rng.random();
        let sim = if outcome == 1 {
            spec.threshold + (1.0 - spec.threshold) * u
        } else {
            spec.threshold * u
        };
        records.push(SummaryRecord {
            id: id.clone(),
            repo,
            tags: BTreeMap::from([("generator".to_string(), "synth".to_string())]),
            token_probs,
            similarity: BTreeMap::from([(spec.metric.clone(), sim)]),
            summary_text: None,
            reference_text: None,
        });
        truth_records.push(TruthRecord {
            id,
            signal_confidence: c,
            success_probability,
            outcome,
        });
    }

    let ratings = spec.ratings.as_ref().map(generate_ratings);
    Generated {
        corpus: Corpus::new(records, format!("synth(seed={})", spec.seed)),
        truth: Truth {
            spec: spec.clone(),
            metric: spec.metric.clone(),
            threshold: spec.threshold,
            records: truth_records,
            ratings: spec.ratings.as_ref().map(|r| RatingTruth {
                metric: r.metric.clone(),
                threshold: r.threshold_hundredths as f64 / 100.0,
            }),
        },
        ratings,
    }
}

/// Human-rating corpus where `metric >= threshold` exactly separates
/// human-similar summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSpec {
    pub n: usize,
    pub seed: u64,
    pub metric: String,
    /// Planted threshold in hundredths, so it lies on the search grid.
    pub threshold_hundredths: u32,
    /// Metrics carrying no signal.
    #[serde(default)]
    pub distractors: Vec<String>,
}

impl RatingSpec {
    pub fn check(&self) -> Result<(), String> {
        if self.n < 2 {
            return Err("rating corpus needs at least 2 records".into());
        }
        if !(1..100).contains(&self.threshold_hundredths) {
            return Err("planted threshold must lie in 0.01..=0.99".into());
        }
        if self.distractors.contains(&self.metric) {
            return Err("distractor names must differ from the planted metric".into());
        }
        Ok(())
    }
}

/// Rating records with roughly half human-similar. One positive sits exactly
/// on the planted threshold; every negative lies strictly below it.
pub fn generate_ratings(spec: &RatingSpec) -> Vec<RatingRecord> {
    if let Err(e) = spec.check() {
        panic!("invalid rating spec: {e}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let theta = spec.threshold_hundredths as f64 / 100.0;
    (0..spec.n)
        .map(|i| {
            // first two records pin one example per class
            let similar = match i {
                0 => true,
                1 => false,
                _ => rng.random::<bool>(),
            };
            let value = match (i, similar) {
                (0, _) => theta,
                (_, true) => theta + (1.0 - theta) * rng.random::<f64>(),
                (_, false) => theta * rng.random::<f64>(),
            };
            let ratings = if similar {
                [0; 3].map(|_| rng.random_range(3..=4u8))
            } else {
                loop {
                    let r = [0; 3].map(|_| rng.random_range(1..=3u8));
                    if r.iter().map(|&x| u32::from(x)).sum::<u32>() < 9 {
                        break r;
                    }
                }
            };
            let mut metric_values = BTreeMap::from([(spec.metric.clone(), value)]);
            for d in &spec.distractors {
                metric_values.insert(d.clone(), rng.random::<f64>());
            }
            RatingRecord {
                id: format!("rated-{i:05}"),
                metric_values,
                ratings: ratings.to_vec(),
            }
        })
        .collect()
}
