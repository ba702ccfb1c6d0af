use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sumcal::confidence::{aggregate, parse_cutoff_grid, token_position_profile};
use sumcal::corpus::{load_ratings, load_records, load_records_unchecked, validate, write_ratings};
use sumcal::correctness::{evaluate_rule, grid_search, label, roc, Selection};
use sumcal::metrics::calibration_report;
use sumcal::pipeline::{self, load_samples, load_summary, to_jsonl, RunConfig, OUT_DIR_ENV};
use sumcal::report::{
    confidence_histogram, render_position_boxplot, render_reliability, render_roc, render_tables, TableRow,
};
use sumcal::rescale::{assign_record_folds, crossval_rescale, labeled_samples, tune_cutoff, CrossValOutput};
use sumcal::stats::{adjust_family, paired_ttest, ALPHA};
use sumcal::synth::{generate, GeneratorSpec};
use sumcal::{Aggregator, ConfidenceSpec, CorrectnessRule, Cutoff, FeatureSpace, LabeledSample, Objective};

#[derive(Parser)]
#[command(name = "sumcal", version, about = "Confidence calibration for LLM code summaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus against the record invariants.
    Validate(ValidateArgs),
    /// Compute per-record confidences.
    Score(ScoreArgs),
    /// Attach binary correctness labels to confidences.
    Label(LabelArgs),
    /// Select a correctness rule against human ratings.
    SearchThresholds(SearchArgs),
    /// Calibration metrics for a labeled sample file.
    Evaluate(EvaluateArgs),
    /// Platt rescaling under repository-grouped cross-validation.
    Rescale(RescaleArgs),
    /// Paired t-tests on squared errors, with Benjamini-Hochberg adjustment.
    Compare(CompareArgs),
    /// Generate a synthetic corpus with known calibration.
    Simulate(SimulateArgs),
    /// Render a single figure.
    Plot(PlotArgs),
    /// Run the full pipeline from a config, or re-render a saved summary.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfidenceArgs {
    #[arg(long, default_value_t = Aggregator::Geometric)]
    aggregator: Aggregator,
    /// Leading tokens to use: a positive integer or `inf`.
    #[arg(long, default_value_t = Cutoff::Unbounded)]
    cutoff: Cutoff,
}

impl ConfidenceArgs {
    fn spec(&self) -> ConfidenceSpec {
        ConfidenceSpec {
            aggregator: self.aggregator,
            cutoff: self.cutoff,
        }
    }
}

#[derive(Args)]
struct RuleArgs {
    /// JSON rule, as written by `search-thresholds`.
    #[arg(long, conflicts_with_all = ["metric", "threshold"])]
    rule: Option<PathBuf>,
    #[arg(long, requires = "threshold")]
    metric: Option<String>,
    #[arg(long, requires = "metric")]
    threshold: Option<f64>,
}

impl RuleArgs {
    fn resolve(&self) -> Result<CorrectnessRule> {
        match (&self.rule, &self.metric, self.threshold) {
            (Some(path), _, _) => read_rule(path),
            (None, Some(metric), Some(threshold)) => Ok(CorrectnessRule::new(metric.clone(), threshold)),
            _ => bail!("a correctness rule is required: pass --rule FILE or --metric NAME --threshold X"),
        }
    }
}

/// Accepts either a bare rule or a full selection document.
fn read_rule(path: &Path) -> Result<CorrectnessRule> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum RuleDoc {
        Selection(Selection),
        Rule(CorrectnessRule),
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: RuleDoc = serde_json::from_str(&text).with_context(|| format!("parsing rule {}", path.display()))?;
    Ok(match doc {
        RuleDoc::Selection(s) => s.rule,
        RuleDoc::Rule(r) => r,
    })
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    records: PathBuf,
    /// Similarity metric every record must carry (repeatable).
    #[arg(long = "require-metric")]
    require_metric: Vec<String>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    records: PathBuf,
    #[command(flatten)]
    confidence: ConfidenceArgs,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    records: PathBuf,
    #[command(flatten)]
    rule: RuleArgs,
    #[command(flatten)]
    confidence: ConfidenceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    HighPrecision,
    HighRecall,
    MaxF1,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::HighPrecision => Objective::HighPrecision,
            ObjectiveArg::HighRecall => Objective::HighRecall,
            ObjectiveArg::MaxF1 => Objective::MaxF1,
        }
    }
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long, value_enum)]
    objective: ObjectiveArg,
    /// Metrics to search, comma separated; default is every metric present
    /// on all rating records.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Labeled samples (JSON lines).
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value = "samples")]
    label: String,
    /// Also write the table and reliability diagram here.
    #[arg(long, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    /// Rating corpus: additionally report the rule's quality (needs a rule).
    #[arg(long, requires = "rule")]
    ratings: Option<PathBuf>,
    #[arg(long)]
    rule: Option<PathBuf>,
}

#[derive(Args)]
struct RescaleArgs {
    /// Records to label and rescale (needed for --tune-cutoff).
    #[arg(long, required_unless_present = "samples", conflicts_with = "samples")]
    records: Option<PathBuf>,
    /// Pre-labeled samples to rescale.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[command(flatten)]
    rule: RuleArgs,
    #[command(flatten)]
    confidence: ConfidenceArgs,
    #[arg(long, default_value_t = sumcal::rescale::DEFAULT_FOLDS)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = sumcal::rescale::DEFAULT_L2)]
    l2: f64,
    #[arg(long, default_value_t = FeatureSpace::LogitConfidence)]
    feature_space: FeatureSpace,
    #[arg(long, requires = "records")]
    tune_cutoff: bool,
    #[arg(long, default_value = "1..30,inf")]
    t_grid: String,
    #[arg(long, env = OUT_DIR_ENV, default_value = "sumcal-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, requires = "b", conflicts_with = "manifest")]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// TOML file listing `[[pair]]` entries with `a`, `b` and optional `name`.
    #[arg(long, required_unless_present = "a")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator spec, TOML or JSON (by extension).
    #[arg(long)]
    spec: PathBuf,
    /// Corpus output; `truth.json` (and `ratings.jsonl` when requested) are
    /// written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Reliability,
    Positions,
    Roc,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// Labeled samples, for `reliability`.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Corpus, for `positions`.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Rating corpus, for `roc`.
    #[arg(long)]
    ratings: Option<PathBuf>,
    /// Metric, for `roc`.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 40)]
    max_position: usize,
    #[arg(long)]
    title: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required_unless_present = "summary", conflicts_with = "summary")]
    config: Option<PathBuf>,
    /// Re-render tables and figures from a saved `summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Overrides the environment and the config's `out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn create_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Box::new(BufWriter::new(
                fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode> {
    let corpus = load_records_unchecked(&args.records)?;
    let required: Vec<&str> = args.require_metric.iter().map(String::as_str).collect();
    let findings = validate(&corpus, &required);
    let mut out = io::stdout().lock();
    for f in &findings {
        writeln!(out, "{f}")?;
    }
    if findings.is_empty() {
        writeln!(out, "{}: {} records, no findings", args.records.display(), corpus.len())?;
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} finding(s)", findings.len());
        Ok(ExitCode::FAILURE)
    }
}

#[derive(Serialize)]
struct Scored<'a> {
    id: &'a str,
    repo: &'a str,
    confidence: f64,
}

fn cmd_score(args: ScoreArgs) -> Result<ExitCode> {
    let corpus = load_records(&args.records)?;
    let spec = args.confidence.spec();
    let mut out = create_out(&args.out)?;
    for r in &corpus.records {
        let confidence = aggregate(&r.token_probs, &spec).with_context(|| format!("record {}", r.id))?;
        serde_json::to_writer(
            &mut out,
            &Scored {
                id: &r.id,
                repo: &r.repo,
                confidence,
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_label(args: LabelArgs) -> Result<ExitCode> {
    let corpus = load_records(&args.records)?;
    let rule = args.rule.resolve()?;
    let spec = args.confidence.spec();
    let mut out = create_out(&args.out)?;
    for r in &corpus.records {
        let sample = LabeledSample::new(
            r.id.clone(),
            r.repo.clone(),
            aggregate(&r.token_probs, &spec).with_context(|| format!("record {}", r.id))?,
            label(r, &rule)?,
        );
        serde_json::to_writer(&mut out, &sample)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_search(args: SearchArgs) -> Result<ExitCode> {
    let ratings = load_ratings(&args.ratings)?;
    let metrics = if args.metrics.is_empty() {
        let mut common: Vec<String> = ratings
            .first()
            .map(|r| r.metric_values.keys().cloned().collect())
            .unwrap_or_default();
        common.retain(|m| ratings.iter().all(|r| r.metric_values.contains_key(m)));
        common
    } else {
        args.metrics
    };
    let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
    let selection = grid_search(&ratings, &names, args.objective.into())?;
    create_out(&args.out)?.write_all(pretty(&selection)?.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct Evaluation {
    label: String,
    report: sumcal::CalibrationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    rule_quality: Option<sumcal::RuleQuality>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let samples = load_samples(&args.samples)?;
    let report = calibration_report(&samples, args.bins)?;
    let rule_quality = match (&args.ratings, &args.rule) {
        (Some(ratings), Some(rule)) => Some(evaluate_rule(&load_ratings(ratings)?, &read_rule(rule)?)?),
        _ => None,
    };
    if let Some(dir) = &args.out_dir {
        let table = render_tables(&[TableRow {
            label: args.label.clone(),
            report: report.clone(),
        }])?;
        write_file(&dir.join("tables.txt"), table.text)?;
        write_file(&dir.join("tables.csv"), table.csv)?;
        let histogram = confidence_histogram(samples.iter().map(|s| s.confidence), 20);
        write_file(
            &dir.join("reliability.svg"),
            render_reliability(&report.bins, &histogram, &args.label),
        )?;
    }
    let evaluation = Evaluation {
        label: args.label,
        report,
        rule_quality,
    };
    io::stdout().lock().write_all(pretty(&evaluation)?.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_rescale(args: RescaleArgs) -> Result<ExitCode> {
    let write_crossval = |cv: &CrossValOutput, prefix: &str| -> Result<()> {
        write_file(&args.out_dir.join(format!("{prefix}models.json")), pretty(&cv.folds)?)?;
        write_file(&args.out_dir.join(format!("{prefix}samples.jsonl")), to_jsonl(&cv.samples))?;
        Ok(())
    };
    let (samples, folds, records) = if let Some(path) = &args.samples {
        let mut samples = load_samples(path)?;
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let folds = sumcal::rescale::assign_folds(samples.iter().map(|s| s.repo.as_str()), args.k, args.seed)?;
        (samples, folds, None)
    } else {
        let path = args.records.as_ref().expect("clap enforces records or samples");
        let corpus = load_records(path)?;
        let rule = args.rule.resolve()?;
        let mut samples = labeled_samples(&corpus.records, &rule, &args.confidence.spec())?;
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let folds = assign_record_folds(&corpus.records, args.k, args.seed)?;
        (samples, folds, Some((corpus, rule)))
    };
    let cv = crossval_rescale(&samples, &folds, args.feature_space, args.l2)?;
    write_file(&args.out_dir.join("folds.json"), pretty(&folds)?)?;
    write_crossval(&cv, "rescaled_")?;
    if args.tune_cutoff {
        let (corpus, rule) = records.expect("clap enforces records with --tune-cutoff");
        let grid = parse_cutoff_grid(&args.t_grid)?;
        let tuned = tune_cutoff(
            &corpus.records,
            &rule,
            &folds,
            &args.confidence.spec(),
            &grid,
            args.feature_space,
            args.l2,
        )?;
        write_crossval(&tuned.crossval, "tuned_")?;
        write_file(&args.out_dir.join("cutoffs.json"), pretty(&tuned.choice)?)?;
    }
    eprintln!("wrote {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    pair: Vec<ManifestPair>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPair {
    #[serde(default)]
    name: Option<String>,
    a: PathBuf,
    b: PathBuf,
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = match (&args.manifest, &args.a, &args.b) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let manifest: Manifest = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            manifest
                .pair
                .into_iter()
                .enumerate()
                .map(|(i, p)| (p.name.unwrap_or_else(|| format!("pair{}", i + 1)), base.join(p.a), base.join(p.b)))
                .collect()
        }
        (None, Some(a), Some(b)) => vec![("a-vs-b".into(), a.clone(), b.clone())],
        _ => bail!("pass --a and --b, or --manifest"),
    };
    if pairs.is_empty() {
        bail!("manifest lists no pairs");
    }
    let mut results = Vec::with_capacity(pairs.len());
    for (name, a, b) in &pairs {
        let r = paired_ttest(&load_samples(a)?, &load_samples(b)?).with_context(|| format!("comparison {name}"))?;
        results.push(r);
    }
    adjust_family(&mut results)?;
    let mut out = create_out(&args.out)?;
    writeln!(out, "name,n_pairs,mean_diff,t_stat,df,p_value,p_adjusted,significant")?;
    for ((name, _, _), r) in pairs.iter().zip(&results) {
        writeln!(
            out,
            "{name},{},{:.6e},{:.4},{},{:.4e},{:.4e},{}",
            r.n_pairs,
            r.mean_diff,
            r.t_stat,
            r.df,
            r.p_value,
            r.p_adjusted,
            r.p_adjusted < ALPHA
        )?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn read_generator_spec(path: &Path) -> Result<GeneratorSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: GeneratorSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    spec.check().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(spec)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let spec = read_generator_spec(&args.spec)?;
    let generated = generate(&spec);
    let dir = args.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut buf = Vec::new();
    generated.corpus.write_jsonl(&mut buf)?;
    write_file(&args.out, buf)?;
    write_file(&dir.join("truth.json"), pretty(&generated.truth)?)?;
    if let Some(ratings) = &generated.ratings {
        let mut buf = Vec::new();
        write_ratings(ratings, &mut buf)?;
        write_file(&dir.join("ratings.jsonl"), buf)?;
    }
    eprintln!("wrote {} records to {}", generated.corpus.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(args: PlotArgs) -> Result<ExitCode> {
    let svg = match args.kind {
        PlotKind::Reliability => {
            let path = args.samples.context("--kind reliability needs --samples")?;
            let samples = load_samples(&path)?;
            let report = calibration_report(&samples, args.bins)?;
            let histogram = confidence_histogram(samples.iter().map(|s| s.confidence), 20);
            render_reliability(&report.bins, &histogram, args.title.as_deref().unwrap_or("Reliability"))
        }
        PlotKind::Positions => {
            let path = args.records.context("--kind positions needs --records")?;
            let corpus = load_records(&path)?;
            let profile = token_position_profile(&corpus.records, args.max_position, 1);
            render_position_boxplot(&profile, args.title.as_deref().unwrap_or("Token probability by position"))
        }
        PlotKind::Roc => {
            let path = args.ratings.context("--kind roc needs --ratings")?;
            let metric = args.metric.context("--kind roc needs --metric")?;
            let curve = roc(&load_ratings(&path)?, &metric)?;
            render_roc(&curve, args.title.as_deref().unwrap_or(&format!("{metric} ROC")))
        }
    };
    write_file(&args.out, svg)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    if let Some(path) = &args.summary {
        let summary = load_summary(path)?;
        let dir = args
            .out_dir
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
        let files = pipeline::render_outputs(&summary, &dir)?;
        eprintln!("rendered {} files into {}", files.len(), dir.display());
        return Ok(ExitCode::SUCCESS);
    }
    let path = args.config.expect("clap enforces config or summary");
    let config = RunConfig::load(&path)?;
    let dir = args.out_dir.unwrap_or_else(|| config.resolved_out_dir());
    let summary = pipeline::run_and_write(&config, &dir)?;
    let mut out = io::stdout().lock();
    for r in &summary.reports {
        let rep = &r.report;
        let skill = rep.skill.map_or("undefined".into(), |s| format!("{s:.4}"));
        writeln!(
            out,
            "{:<24} n={} success={:.4} ece={:.4} brier={:.4} skill={skill}",
            r.label, rep.n, rep.success_rate, rep.ece, rep.brier
        )?;
    }
    for c in &summary.comparisons {
        writeln!(
            out,
            "{} vs {}: t={:.3} p={:.3e} p_adj={:.3e} significant={}",
            c.a, c.b, c.result.t_stat, c.result.p_value, c.result.p_adjusted, c.significant
        )?;
    }
    writeln!(out, "outputs in {}", dir.display())?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate(a) => cmd_validate(a).context("validate"),
        Command::Score(a) => cmd_score(a).context("score"),
        Command::Label(a) => cmd_label(a).context("label"),
        Command::SearchThresholds(a) => cmd_search(a).context("search-thresholds"),
        Command::Evaluate(a) => cmd_evaluate(a).context("evaluate"),
        Command::Rescale(a) => cmd_rescale(a).context("rescale"),
        Command::Compare(a) => cmd_compare(a).context("compare"),
        Command::Simulate(a) => cmd_simulate(a).context("simulate"),
        Command::Plot(a) => cmd_plot(a).context("plot"),
        Command::Report(a) => cmd_report(a).context("report"),
    }
}

/// A downstream reader closing stdout early (`| head`) is not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<io::Error>().map(io::Error::kind)
            .or_else(|| c.downcast_ref::<serde_json::Error>().and_then(serde_json::Error::io_error_kind))
            == Some(io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
