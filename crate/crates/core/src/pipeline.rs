//! End-to-end run: label, measure, rescale, compare, render.
//!
//! A run writes a machine-readable `summary.json` and then renders every table
//! and figure from that summary alone, via [`render_outputs`].

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{parse_cutoff_grid, token_position_profile, Aggregator, ConfidenceSpec, Cutoff, PositionSummary};
use crate::corpus::{load_ratings, load_records, RatingRecord};
use crate::correctness::{grid_search, roc, CorrectnessRule, Objective, RocCurve, RuleQuality};
use crate::metrics::{calibration_report, CalibrationReport};
use crate::report::{
    confidence_histogram, render_position_boxplot, render_reliability, render_roc, render_tables, HistogramBin,
    TableRow,
};
use crate::rescale::{
    assign_record_folds, crossval_rescale, labeled_samples, tune_cutoff, CrossValOutput, CutoffChoice,
    FeatureSpace, FoldAssignment, FoldFit, RescaledSample, DEFAULT_FOLDS, DEFAULT_L2,
};
use crate::stats::{adjust_family, paired_ttest, ComparisonResult, ALPHA};
use crate::Error;

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "SUMCAL_OUT_DIR";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

fn stage<T, E: Into<Error>>(name: &'static str, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::Stage {
        stage: name,
        source: Box::new(e.into()),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn default_k() -> usize {
    DEFAULT_FOLDS
}
fn default_l2() -> f64 {
    DEFAULT_L2
}
fn default_bins() -> usize {
    10
}
fn default_grid() -> String {
    "1..30,inf".into()
}
fn default_positions() -> usize {
    40
}
fn default_label() -> String {
    "corpus".into()
}

/// Pipeline configuration, read from a flat `key = value` file.
///
/// ```text
/// records = "summaries.jsonl"
/// metric = "bertscore"
/// threshold = 0.49
/// k = 5
/// seed = 0
/// tune_cutoff = true
/// t_grid = "1..30,inf"
/// ```
///
/// Instead of `metric`/`threshold`, give `ratings` plus `objective` to select
/// the rule by grid search. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub records: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<Objective>,
    /// Metrics searched with `objective`; defaults to every metric present on
    /// all rating records.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub search_metrics: Vec<String>,
    #[serde(default)]
    pub aggregator: Aggregator,
    #[serde(default)]
    pub cutoff: Cutoff,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default)]
    pub feature_space: FeatureSpace,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub tune_cutoff: bool,
    #[serde(default = "default_grid")]
    pub t_grid: String,
    #[serde(default = "default_positions")]
    pub profile_positions: usize,
    #[serde(default = "default_label")]
    pub label: String,
    /// Not echoed into the summary, so runs into different directories match.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(records: impl Into<PathBuf>, rule: CorrectnessRule) -> Self {
        Self {
            records: records.into(),
            ratings: None,
            metric: Some(rule.metric),
            threshold: Some(rule.threshold),
            objective: None,
            search_metrics: Vec::new(),
            aggregator: Aggregator::default(),
            cutoff: Cutoff::default(),
            k: DEFAULT_FOLDS,
            seed: 0,
            l2: DEFAULT_L2,
            feature_space: FeatureSpace::default(),
            bins: default_bins(),
            tune_cutoff: false,
            t_grid: default_grid(),
            profile_positions: default_positions(),
            label: default_label(),
            out_dir: None,
        }
    }

    /// Parses a config; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.records);
        if let Some(r) = cfg.ratings.as_mut() {
            resolve(r);
        }
        if let Some(o) = cfg.out_dir.as_mut() {
            resolve(o);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn confidence_spec(&self) -> ConfidenceSpec {
        ConfidenceSpec {
            aggregator: self.aggregator,
            cutoff: self.cutoff,
        }
    }

    /// Output directory: `$SUMCAL_OUT_DIR`, else `out_dir`, else `./sumcal-out`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("sumcal-out"))
    }

    fn check(&self) -> Result<(), PipelineError> {
        let explicit = self.metric.is_some() || self.threshold.is_some();
        match (explicit, self.objective.is_some()) {
            (true, true) => {
                return Err(PipelineError::Config(
                    "give either metric/threshold or objective, not both".into(),
                ))
            }
            (false, false) => {
                return Err(PipelineError::Config(
                    "no correctness rule: set metric and threshold, or ratings and objective".into(),
                ))
            }
            (true, false) if self.metric.is_none() || self.threshold.is_none() => {
                return Err(PipelineError::Config("metric and threshold go together".into()))
            }
            (false, true) if self.ratings.is_none() => {
                return Err(PipelineError::Config("objective needs a ratings file".into()))
            }
            _ => {}
        }
        if self.bins == 0 {
            return Err(PipelineError::Config("bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// One calibration report plus what is needed to redraw its figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    pub label: String,
    pub report: CalibrationReport,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule: CorrectnessRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<Objective>,
    /// Quality against the rating corpus, when one was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<RuleQuality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedComparison {
    pub a: String,
    pub b: String,
    pub result: ComparisonResult,
    pub alpha: f64,
    pub significant: bool,
}

/// Everything a run produces, sufficient to redraw every table and figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: RunConfig,
    pub n_records: usize,
    pub rule: RuleSummary,
    pub folds: FoldAssignment,
    pub reports: Vec<NamedReport>,
    pub fold_models: Vec<FoldFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff_choice: Option<CutoffChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuned_fold_models: Option<Vec<FoldFit>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<NamedComparison>,
    pub position_profile: Vec<PositionSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc: Option<RocCurve>,
}

/// In-memory result of [`run_pipeline`].
pub struct RunOutput {
    pub summary: Summary,
    pub raw: Vec<crate::metrics::LabeledSample>,
    pub rescaled: CrossValOutput,
    pub tuned: Option<CrossValOutput>,
}

const HISTOGRAM_BINS: usize = 20;

fn named(name: &str, label: String, samples: &[crate::metrics::LabeledSample], bins: usize) -> Result<NamedReport, PipelineError> {
    Ok(NamedReport {
        name: name.to_string(),
        label,
        report: stage("metrics", calibration_report(samples, bins))?,
        histogram: confidence_histogram(samples.iter().map(|s| s.confidence), HISTOGRAM_BINS),
    })
}

fn common_metrics(ratings: &[RatingRecord]) -> Vec<String> {
    let mut iter = ratings.iter();
    let Some(first) = iter.next() else {
        return Vec::new();
    };
    let mut common: BTreeSet<&String> = first.metric_values.keys().collect();
    for r in iter {
        common.retain(|m| r.metric_values.contains_key(*m));
    }
    common.into_iter().cloned().collect()
}

/// Runs every stage in memory.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutput, PipelineError> {
    config.check()?;
    let corpus = stage("load records", load_records(&config.records))?;
    if corpus.is_empty() {
        return Err(PipelineError::Config(format!("{} holds no records", config.records.display())));
    }
    let ratings = match &config.ratings {
        Some(path) => Some(stage("load ratings", load_ratings(path))?),
        None => None,
    };

    let rule_summary = match (&config.metric, config.threshold, config.objective) {
        (Some(metric), Some(threshold), _) => {
            let rule = CorrectnessRule::new(metric.clone(), threshold);
            let quality = match &ratings {
                Some(r) => Some(stage("evaluate rule", crate::correctness::evaluate_rule(r, &rule))?),
                None => None,
            };
            RuleSummary {
                rule,
                objective: None,
                quality,
            }
        }
        (_, _, Some(objective)) => {
            let ratings = ratings.as_deref().expect("checked");
            let metrics = if config.search_metrics.is_empty() {
                common_metrics(ratings)
            } else {
                config.search_metrics.clone()
            };
            let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
            let sel = stage("search thresholds", grid_search(ratings, &names, objective))?;
            RuleSummary {
                rule: sel.rule,
                objective: Some(objective),
                quality: Some(sel.quality),
            }
        }
        _ => unreachable!("config checked"),
    };
    let rule = &rule_summary.rule;
    let roc_curve = match &ratings {
        Some(r) => Some(stage("roc", roc(r, &rule.metric))?),
        None => None,
    };

    let spec = config.confidence_spec();
    let mut raw = stage("label", labeled_samples(&corpus.records, rule, &spec))?;
    raw.sort_by(|a, b| a.id.cmp(&b.id));
    let folds = stage("assign folds", assign_record_folds(&corpus.records, config.k, config.seed))?;
    let rescaled = stage("rescale", crossval_rescale(&raw, &folds, config.feature_space, config.l2))?;

    let mut reports = vec![
        named("raw", format!("{} raw", config.label), &raw, config.bins)?,
        named("rescaled", format!("{} rescaled", config.label), &rescaled.labeled(), config.bins)?,
    ];

    let mut comparisons = Vec::new();
    let mut tuned = None;
    let mut cutoff_choice = None;
    if config.tune_cutoff {
        let grid = stage("cutoff grid", parse_cutoff_grid(&config.t_grid))?;
        let out = stage(
            "tune cutoff",
            tune_cutoff(&corpus.records, rule, &folds, &spec, &grid, config.feature_space, config.l2),
        )?;
        let tuned_samples = out.crossval.labeled();
        reports.push(named("tuned", format!("{} tuned cutoff", config.label), &tuned_samples, config.bins)?);
        let result = stage("compare", paired_ttest(&tuned_samples, &rescaled.labeled()))?;
        let mut family = vec![result];
        stage("compare", adjust_family(&mut family))?;
        let result = family.pop().expect("one comparison");
        comparisons.push(NamedComparison {
            a: "tuned".into(),
            b: "rescaled".into(),
            significant: result.p_adjusted < ALPHA,
            alpha: ALPHA,
            result,
        });
        cutoff_choice = Some(out.choice);
        tuned = Some(out.crossval);
    }

    let summary = Summary {
        config: config.clone(),
        n_records: corpus.len(),
        rule: rule_summary,
        folds,
        reports,
        fold_models: rescaled.folds.clone(),
        cutoff_choice,
        tuned_fold_models: tuned.as_ref().map(|t| t.folds.clone()),
        comparisons,
        position_profile: token_position_profile(&corpus.records, config.profile_positions, 1),
        roc: roc_curve,
    };
    Ok(RunOutput {
        summary,
        raw,
        rescaled,
        tuned,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Writes tables and figures derived from `summary`; returns the file names.
pub fn render_outputs(summary: &Summary, dir: &Path) -> Result<Vec<String>, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let mut emit = |name: String, contents: String| -> Result<(), PipelineError> {
        write(&dir.join(&name), contents)?;
        written.push(name);
        Ok(())
    };

    let rows: Vec<TableRow> = summary
        .reports
        .iter()
        .map(|r| TableRow {
            label: r.label.clone(),
            report: r.report.clone(),
        })
        .collect();
    let tables = stage("render tables", render_tables(&rows))?;
    emit("tables.txt".into(), tables.text)?;
    emit("tables.csv".into(), tables.csv)?;

    for r in &summary.reports {
        emit(
            format!("reliability_{}.svg", r.name),
            render_reliability(&r.report.bins, &r.histogram, &r.label),
        )?;
    }
    emit(
        "token_positions.svg".into(),
        render_position_boxplot(&summary.position_profile, "Token probability by position"),
    )?;
    if let Some(curve) = &summary.roc {
        emit(
            "roc.svg".into(),
            render_roc(curve, &format!("{} ROC", summary.rule.rule.metric)),
        )?;
    }
    if !summary.comparisons.is_empty() {
        let mut text = String::from("a,b,n_pairs,mean_diff,t_stat,df,p_value,p_adjusted,significant\n");
        for c in &summary.comparisons {
            let r = &c.result;
            text.push_str(&format!(
                "{},{},{},{:.6e},{:.4},{},{:.4e},{:.4e},{}\n",
                c.a, c.b, r.n_pairs, r.mean_diff, r.t_stat, r.df, r.p_value, r.p_adjusted, c.significant
            ));
        }
        emit("comparisons.csv".into(), text)?;
    }
    Ok(written)
}

/// Runs the pipeline and writes the summary, samples, models and renderings.
pub fn run_and_write(config: &RunConfig, dir: &Path) -> Result<Summary, PipelineError> {
    let out = run_pipeline(config)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join("summary.json"), pretty(&out.summary))?;
    write(&dir.join("raw_samples.jsonl"), to_jsonl(&out.raw))?;
    write(&dir.join("rescaled_samples.jsonl"), to_jsonl::<RescaledSample>(&out.rescaled.samples))?;
    write(&dir.join("models.json"), pretty(&out.rescaled.folds))?;
    if let Some(t) = &out.tuned {
        write(&dir.join("tuned_samples.jsonl"), to_jsonl::<RescaledSample>(&t.samples))?;
        write(&dir.join("tuned_models.json"), pretty(&t.folds))?;
    }
    render_outputs(&out.summary, dir)?;
    Ok(out.summary)
}

/// Reads labeled samples, one JSON object per line. Extra fields (such as
/// those of rescaled samples) are ignored.
pub fn load_samples(path: &Path) -> Result<Vec<crate::metrics::LabeledSample>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(line)
            .map_err(|e| PipelineError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        samples.push(sample);
    }
    stage("samples", crate::metrics::check_samples(&samples))?;
    Ok(samples)
}

pub fn load_summary(path: &Path) -> Result<Summary, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}
