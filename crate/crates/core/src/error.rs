use thiserror::Error;

use crate::confidence::ConfidenceError;
use crate::corpus::CorpusError;
use crate::correctness::CorrectnessError;
use crate::metrics::MetricsError;
use crate::pipeline::PipelineError;
use crate::report::ReportError;
use crate::rescale::RescaleError;
use crate::stats::StatsError;

/// Crate-wide error, one variant per module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Correctness(#[from] CorrectnessError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Rescale(#[from] RescaleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
