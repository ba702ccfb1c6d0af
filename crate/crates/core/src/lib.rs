//! Calibrated confidence scores for LLM-generated code summaries.
//!
//! The toolkit turns per-token probabilities of a generated summary into a
//! single confidence, labels the summary correct or incorrect by thresholding
//! a precomputed similarity metric, and then measures and repairs the
//! calibration of those confidences:
//!
//! - [`corpus`]: JSON-lines ingestion and validation of summary and rating records
//! - [`confidence`]: geometric/arithmetic aggregation with a first-`t`-token cutoff
//! - [`correctness`]: thresholded correctness rules, threshold grid search, ROC/AUC
//! - [`metrics`]: Brier, reference Brier, skill score, ECE, reliability bins, Spearman
//! - [`rescale`]: Platt scaling, repository-grouped folds, out-of-fold rescaling, cutoff tuning
//! - [`stats`]: paired t-test and Benjamini-Hochberg adjustment
//! - [`synth`]: seeded synthetic corpora with known ground truth
//! - [`report`] and [`pipeline`]: tables, SVG figures and the end-to-end run

pub mod confidence;
pub mod corpus;
pub mod correctness;
mod error;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod rescale;
pub mod stats;
pub mod synth;

pub use confidence::{Aggregator, ConfidenceSpec, Cutoff};
pub use corpus::{Corpus, RatingRecord, SummaryRecord};
pub use correctness::{CorrectnessRule, Objective, RuleQuality};
pub use error::{Error, Result};
pub use metrics::{CalibrationReport, LabeledSample, ReliabilityBin};
pub use rescale::{FeatureSpace, FoldAssignment, PlattModel};
pub use stats::ComparisonResult;
