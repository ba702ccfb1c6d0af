//! Sequence confidence from per-token probabilities.

use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SummaryRecord;

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("token probability list is empty")]
    Empty,
    #[error("token probability {value} at position {position} is outside (0, 1]")]
    OutOfRange { position: usize, value: f64 },
    #[error("invalid aggregator {0:?} (expected geometric or arithmetic)")]
    BadAggregator(String),
    #[error("invalid cutoff {0:?} (expected a positive integer or inf)")]
    BadCutoff(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Geometric,
    Arithmetic,
}

impl FromStr for Aggregator {
    type Err = ConfidenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(Aggregator::Geometric),
            "arithmetic" => Ok(Aggregator::Arithmetic),
            other => Err(ConfidenceError::BadAggregator(other.to_string())),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Geometric => "geometric",
            Aggregator::Arithmetic => "arithmetic",
        })
    }
}

/// Number of leading tokens that enter the aggregate.
///
/// Orders with every finite cutoff below `Unbounded`. Serialized as an integer
/// or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Cutoff {
    First(NonZeroUsize),
    #[default]
    Unbounded,
}

impl Cutoff {
    pub fn first(t: usize) -> Option<Self> {
        NonZeroUsize::new(t).map(Cutoff::First)
    }

    /// How many of `len` tokens are used.
    pub fn take(self, len: usize) -> usize {
        match self {
            Cutoff::First(t) => t.get().min(len),
            Cutoff::Unbounded => len,
        }
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cutoff::First(t) => write!(f, "{t}"),
            Cutoff::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for Cutoff {
    type Err = ConfidenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if matches!(s, "inf" | "all" | "unbounded") {
            return Ok(Cutoff::Unbounded);
        }
        s.parse::<usize>()
            .ok()
            .and_then(Cutoff::first)
            .ok_or_else(|| ConfidenceError::BadCutoff(s.to_string()))
    }
}

impl Serialize for Cutoff {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Cutoff::First(t) => serializer.serialize_u64(t.get() as u64),
            Cutoff::Unbounded => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Cutoff {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(u64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Int(t) => Cutoff::first(t as usize)
                .ok_or_else(|| serde::de::Error::custom("cutoff must be at least 1")),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Parses a candidate list such as `1..30,inf` or `3,5,8`.
pub fn parse_cutoff_grid(text: &str) -> Result<Vec<Cutoff>, ConfidenceError> {
    let mut grid = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let bad = || ConfidenceError::BadCutoff(part.to_string());
            let lo: usize = lo.trim().parse().map_err(|_| bad())?;
            let hi: usize = hi.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
            if lo == 0 || hi < lo {
                return Err(bad());
            }
            grid.extend((lo..=hi).filter_map(Cutoff::first));
        } else {
            grid.push(part.parse()?);
        }
    }
    grid.sort();
    grid.dedup();
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfidenceSpec {
    pub aggregator: Aggregator,
    pub cutoff: Cutoff,
}

impl ConfidenceSpec {
    pub fn with_cutoff(self, cutoff: Cutoff) -> Self {
        Self { cutoff, ..self }
    }
}

/// Collapses the first `spec.cutoff` token probabilities into one confidence.
///
/// The geometric mean is taken in log space; every probability in the list is
/// range-checked, including those past the cutoff.
pub fn aggregate(token_probs: &[f64], spec: &ConfidenceSpec) -> Result<f64, ConfidenceError> {
    if token_probs.is_empty() {
        return Err(ConfidenceError::Empty);
    }
    if let Some((position, &value)) = token_probs
        .iter()
        .enumerate()
        .find(|(_, &p)| !(p > 0.0 && p <= 1.0))
    {
        return Err(ConfidenceError::OutOfRange { position, value });
    }
    let used = &token_probs[..spec.cutoff.take(token_probs.len())];
    let n = used.len() as f64;
    let value = match spec.aggregator {
        Aggregator::Geometric => (used.iter().map(|p| p.ln()).sum::<f64>() / n).exp(),
        Aggregator::Arithmetic => used.iter().sum::<f64>() / n,
    };
    Ok(value.clamp(f64::MIN_POSITIVE, 1.0))
}

/// Five-number summary of the probabilities observed in one position bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSummary {
    /// 1-based, inclusive.
    pub first_position: usize,
    pub last_position: usize,
    pub count: usize,
    pub stats: Option<FiveNumber>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    /// Quartiles by linear interpolation between order statistics.
    pub fn of(values: &mut [f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (values.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            values[lo] + (h - lo as f64) * (values[hi] - values[lo])
        };
        Some(FiveNumber {
            min: values[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: values[values.len() - 1],
        })
    }
}

/// Distribution of token probabilities by position, pooled across records.
///
/// Positions `1..=max_position` are grouped into buckets of `bucket_width`
/// consecutive positions (the last bucket may be narrower). A bucket no record
/// reaches has `count == 0` and no statistics.
pub fn token_position_profile(
    records: &[SummaryRecord],
    max_position: usize,
    bucket_width: usize,
) -> Vec<PositionSummary> {
    let width = bucket_width.max(1);
    let buckets = max_position.div_ceil(width);
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); buckets];
    for record in records {
        for (idx, &p) in record.token_probs.iter().take(max_position).enumerate() {
            values[idx / width].push(p);
        }
    }
    values
        .into_iter()
        .enumerate()
        .map(|(b, mut vals)| PositionSummary {
            first_position: b * width + 1,
            last_position: ((b + 1) * width).min(max_position),
            count: vals.len(),
            stats: FiveNumber::of(&mut vals),
        })
        .collect()
}
