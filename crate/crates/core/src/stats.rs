//! Paired t-test on per-sample squared errors and Benjamini-Hochberg
//! adjustment.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::LabeledSample;

/// Significance level used when reporting comparisons.
pub const ALPHA: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("sample {0:?} has no partner in the other treatment")]
    Unmatched(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("difference lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("p-value {0} is outside [0, 1]")]
    PValueOutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub n_pairs: usize,
    /// Mean of `a - b`.
    pub mean_diff: f64,
    pub t_stat: f64,
    pub df: usize,
    pub p_value: f64,
    /// Equal to `p_value` until [`adjust_family`] runs.
    pub p_adjusted: f64,
}

/// Two-sided one-sample t-test of `diffs` against zero.
///
/// Zero-variance differences give `p = 0` when their mean is nonzero and
/// `p = 1` when it is zero.
pub fn ttest_differences(diffs: &[f64]) -> Result<ComparisonResult, StatsError> {
    let n = diffs.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (nf - 1.0);
    let df = n - 1;
    let (t_stat, p_value) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (var / nf).sqrt();
        (t, student_t_two_sided(t, df as f64))
    };
    Ok(ComparisonResult {
        n_pairs: n,
        mean_diff: mean,
        t_stat,
        df,
        p_value,
        p_adjusted: p_value,
    })
}

/// Paired test on squared errors, joining the two treatments by sample id.
///
/// Differences are `a - b`, taken in ascending id order.
pub fn paired_ttest(
    a: &[LabeledSample],
    b: &[LabeledSample],
) -> Result<ComparisonResult, StatsError> {
    let mut by_id: HashMap<&str, f64> = HashMap::with_capacity(b.len());
    for s in b {
        if by_id.insert(&s.id, s.squared_error()).is_some() {
            return Err(StatsError::DuplicateId(s.id.clone()));
        }
    }
    if a.len() != b.len() {
        let known: std::collections::HashSet<&str> = a.iter().map(|s| s.id.as_str()).collect();
        let orphan = b
            .iter()
            .find(|s| !known.contains(s.id.as_str()))
            .or_else(|| a.iter().find(|s| !by_id.contains_key(s.id.as_str())));
        if let Some(s) = orphan {
            return Err(StatsError::Unmatched(s.id.clone()));
        }
    }
    let mut pairs = Vec::with_capacity(a.len());
    for s in a {
        let other = by_id
            .remove(s.id.as_str())
            .ok_or_else(|| StatsError::Unmatched(s.id.clone()))?;
        pairs.push((s.id.as_str(), s.squared_error() - other));
    }
    if let Some(id) = by_id.keys().next() {
        return Err(StatsError::Unmatched(id.to_string()));
    }
    pairs.sort_by(|x, y| x.0.cmp(y.0));
    let diffs: Vec<f64> = pairs.into_iter().map(|(_, d)| d).collect();
    ttest_differences(&diffs)
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::PValueOutOfRange(p));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank0, &idx) in order.iter().enumerate().rev() {
        let scaled = p_values[idx] * m as f64 / (rank0 + 1) as f64;
        running = running.min(scaled);
        adjusted[idx] = running.min(1.0).max(p_values[idx]);
    }
    Ok(adjusted)
}

/// Fills `p_adjusted` across a family of comparisons.
pub fn adjust_family(results: &mut [ComparisonResult]) -> Result<(), StatsError> {
    let raw: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    for (r, adj) in results.iter_mut().zip(bh_adjust(&raw)?) {
        r.p_adjusted = adj.max(r.p_value);
    }
    Ok(())
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)`, evaluated with the Lentz continued fraction on whichever
/// tail converges fastest.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
