//! Input data model and JSON-lines ingestion.
//!
//! A summary corpus is one [`SummaryRecord`] per line. The first line may be a
//! header object `{"encoding":"logprob"}` (or `{"encoding":"prob"}`), in which
//! case every `token_probs` entry is read as a natural-log probability and
//! exponentiated on load. Records are always held, and written back, as
//! linear probabilities.
//!
//! Whether a producer recorded the chosen-token probability or a value
//! renormalized over its top-k candidates is not knowable from the file; the
//! loader takes the numbers as given.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}:{line}: malformed record: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}:{line}: record {id:?} field `{field}`: {message}")]
    Invalid {
        source_name: String,
        line: usize,
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("{source_name}:{line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        source_name: String,
        line: usize,
        id: String,
        first_line: usize,
    },
    #[error("write failed: {0}")]
    Write(#[source] std::io::Error),
}

/// One generated summary with its per-token probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub id: String,
    /// Grouping key for cross-validation folds.
    pub repo: String,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    pub token_probs: Vec<f64>,
    #[serde(default)]
    pub similarity: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_text: Option<String>,
}

/// A summary from a human-rating study: metric values plus three 1-4 ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub id: String,
    pub metric_values: BTreeMap<String, f64>,
    pub ratings: Vec<u8>,
}

impl RatingRecord {
    pub fn mean_rating(&self) -> f64 {
        self.ratings.iter().map(|&r| f64::from(r)).sum::<f64>() / self.ratings.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<SummaryRecord>,
    /// Where the records came from (a path, or a generator description).
    pub source: String,
}

impl Corpus {
    pub fn new(records: Vec<SummaryRecord>, source: impl Into<String>) -> Self {
        Self {
            records,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the corpus as JSON-lines with linear probabilities and no header.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        for record in &self.records {
            let line = serde_json::to_string(record).expect("records always serialize");
            writeln!(out, "{line}").map_err(CorpusError::Write)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Prob,
    Logprob,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoding: Encoding,
}

/// Violated invariant reported by [`validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingRule {
    EmptyTokenList,
    ProbabilityOutOfRange,
    DuplicateId,
    MissingMetric,
    NonFiniteSimilarity,
}

impl fmt::Display for FindingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FindingRule::EmptyTokenList => "empty token list",
            FindingRule::ProbabilityOutOfRange => "probability out of range",
            FindingRule::DuplicateId => "duplicate id",
            FindingRule::MissingMetric => "missing similarity metric",
            FindingRule::NonFiniteSimilarity => "non-finite similarity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub id: String,
    pub rule: FindingRule,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.id, self.rule, self.detail)
    }
}

/// Checks every record invariant, plus presence of `required_metrics`.
///
/// Never fails; an empty result means the corpus is valid.
pub fn validate(corpus: &Corpus, required_metrics: &[&str]) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut seen = HashMap::new();
    for record in &corpus.records {
        findings.extend(record_findings(record, required_metrics));
        if seen.insert(record.id.as_str(), ()).is_some() {
            findings.push(Finding {
                id: record.id.clone(),
                rule: FindingRule::DuplicateId,
                detail: "id appears more than once".into(),
            });
        }
    }
    findings
}

fn record_findings(record: &SummaryRecord, required_metrics: &[&str]) -> Vec<Finding> {
    let mut findings = Vec::new();
    let finding = |rule, detail: String| Finding {
        id: record.id.clone(),
        rule,
        detail,
    };
    if record.token_probs.is_empty() {
        findings.push(finding(FindingRule::EmptyTokenList, "token_probs is empty".into()));
    }
    for (pos, &p) in record.token_probs.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            findings.push(finding(
                FindingRule::ProbabilityOutOfRange,
                format!("token_probs[{pos}] = {p} is outside (0, 1]"),
            ));
        }
    }
    for metric in required_metrics {
        if !record.similarity.contains_key(*metric) {
            findings.push(finding(
                FindingRule::MissingMetric,
                format!("similarity lacks {metric:?}"),
            ));
        }
    }
    for (metric, value) in &record.similarity {
        if !value.is_finite() {
            findings.push(finding(
                FindingRule::NonFiniteSimilarity,
                format!("similarity {metric:?} = {value}"),
            ));
        }
    }
    findings
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Non-blank lines with 1-based line numbers.
fn numbered_lines<R: BufRead>(
    reader: R,
    source_name: &str,
) -> Result<Vec<(usize, String)>, CorpusError> {
    let mut lines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: source_name.to_string(),
            source,
        })?;
        if !line.trim().is_empty() {
            lines.push((idx + 1, line));
        }
    }
    Ok(lines)
}

/// Parses records without checking invariants other than syntax.
///
/// Log-probabilities are still normalized when the header asks for it.
pub fn parse_records<R: BufRead>(
    reader: R,
    source_name: &str,
) -> Result<Vec<(usize, SummaryRecord)>, CorpusError> {
    let mut lines = numbered_lines(reader, source_name)?.into_iter().peekable();
    let mut encoding = Encoding::Prob;
    if let Some((_, first)) = lines.peek() {
        if let Ok(header) = serde_json::from_str::<Header>(first) {
            encoding = header.encoding;
            lines.next();
        }
    }
    lines
        .map(|(line, text)| {
            let mut record: SummaryRecord =
                serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
                    source_name: source_name.to_string(),
                    line,
                    message: e.to_string(),
                })?;
            if encoding == Encoding::Logprob {
                for p in &mut record.token_probs {
                    *p = p.exp();
                }
            }
            Ok((line, record))
        })
        .collect()
}

/// Parses and validates a summary corpus; the first violation aborts.
pub fn read_records<R: BufRead>(reader: R, source_name: &str) -> Result<Corpus, CorpusError> {
    let parsed = parse_records(reader, source_name)?;
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::with_capacity(parsed.len());
    for (line, record) in parsed {
        if let Some(finding) = record_findings(&record, &[]).into_iter().next() {
            let field = match finding.rule {
                FindingRule::NonFiniteSimilarity => "similarity",
                _ => "token_probs",
            };
            return Err(CorpusError::Invalid {
                source_name: source_name.to_string(),
                line,
                id: record.id,
                field,
                message: format!("{}: {}", finding.rule, finding.detail),
            });
        }
        if let Some(&first_line) = first_seen.get(&record.id) {
            return Err(CorpusError::DuplicateId {
                source_name: source_name.to_string(),
                line,
                id: record.id,
                first_line,
            });
        }
        first_seen.insert(record.id.clone(), line);
        records.push(record);
    }
    Ok(Corpus::new(records, source_name))
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    read_records(open(path)?, &path.display().to_string())
}

/// Loads a corpus checking syntax only, so [`validate`] can list every problem.
pub fn load_records_unchecked(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let records = parse_records(open(path)?, &name)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    Ok(Corpus::new(records, name))
}

#[derive(Deserialize)]
struct RawRating {
    id: String,
    metric_values: BTreeMap<String, f64>,
    ratings: Vec<i64>,
}

pub fn read_ratings<R: BufRead>(
    reader: R,
    source_name: &str,
) -> Result<Vec<RatingRecord>, CorpusError> {
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (line, text) in numbered_lines(reader, source_name)? {
        let raw: RawRating = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            source_name: source_name.to_string(),
            line,
            message: e.to_string(),
        })?;
        let invalid = |field, message: String| CorpusError::Invalid {
            source_name: source_name.to_string(),
            line,
            id: raw.id.clone(),
            field,
            message,
        };
        if raw.ratings.len() != 3 {
            return Err(invalid(
                "ratings",
                format!("expected 3 ratings, found {}", raw.ratings.len()),
            ));
        }
        if let Some(bad) = raw.ratings.iter().find(|r| !(1..=4).contains(*r)) {
            return Err(invalid("ratings", format!("rating {bad} is outside 1..=4")));
        }
        if let Some((metric, v)) = raw.metric_values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(invalid("metric_values", format!("{metric:?} = {v} is not finite")));
        }
        if let Some(&first_line) = first_seen.get(&raw.id) {
            return Err(CorpusError::DuplicateId {
                source_name: source_name.to_string(),
                line,
                id: raw.id,
                first_line,
            });
        }
        first_seen.insert(raw.id.clone(), line);
        out.push(RatingRecord {
            id: raw.id,
            metric_values: raw.metric_values,
            ratings: raw.ratings.iter().map(|&r| r as u8).collect(),
        });
    }
    Ok(out)
}

pub fn load_ratings(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>, CorpusError> {
    let path = path.as_ref();
    read_ratings(open(path)?, &path.display().to_string())
}

pub fn write_ratings<W: Write>(ratings: &[RatingRecord], mut out: W) -> Result<(), CorpusError> {
    for record in ratings {
        let line = serde_json::to_string(record).expect("ratings always serialize");
        writeln!(out, "{line}").map_err(CorpusError::Write)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn read(text: &str) -> Result<Corpus, CorpusError> {
        read_records(text.as_bytes(), "mem")
    }

    const THREE: &str = r#"{"id":"a","repo":"r1","token_probs":[0.5,0.9],"similarity":{"bertscore":0.5}}
{"id":"b","repo":"r1","token_probs":[1.0],"similarity":{"bertscore":0.2},"tags":{"language":"java"}}
{"id":"c","repo":"r2","token_probs":[0.3,0.3,0.3],"similarity":{"bertscore":0.9},"summary_text":"Returns x."}
"#;

    #[test]
    fn loads_three_records() {
        let corpus = read(THREE).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.records[1].tags["language"], "java");
        assert_eq!(corpus.records[2].summary_text.as_deref(), Some("Returns x."));
    }

    #[test]
    fn zero_probability_names_line_and_field() {
        let text = "{\"id\":\"a\",\"repo\":\"r\",\"token_probs\":[0.5]}\n\
                    {\"id\":\"b\",\"repo\":\"r\",\"token_probs\":[0.5,0.0]}\n";
        match read(text).unwrap_err() {
            CorpusError::Invalid { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "token_probs");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = "{\"id\":\"a\",\"repo\":\"r\",\"token_probs\":[0.5]}\n\
                    {\"id\":\"a\",\"repo\":\"s\",\"token_probs\":[0.6]}\n";
        let err = read(text).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, first_line: 1, .. }));
    }

    #[test]
    fn empty_token_list_rejected() {
        let err = read("{\"id\":\"a\",\"repo\":\"r\",\"token_probs\":[]}").unwrap_err();
        assert!(err.to_string().contains("empty token list"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = read("{\"id\":\"a\",\"repo\":\"r\",\"token_probs\":[0.5]}\n\n{oops\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn logprob_header_is_normalized() {
        let text = "{\"encoding\":\"logprob\"}\n{\"id\":\"a\",\"repo\":\"r\",\"token_probs\":[0.0,-0.6931471805599453]}\n";
        let corpus = read(text).unwrap();
        assert_eq!(corpus.records[0].token_probs[0], 1.0);
        assert!((corpus.records[0].token_probs[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn positive_logprob_is_out_of_range() {
        let text = "{\"encoding\":\"logprob\"}\n{\"id\":\"a\",\"repo\":\"r\",\"token_probs\":[0.1]}\n";
        assert!(read(text).is_err());
    }

    #[test]
    fn validate_reports_findings_without_failing() {
        let mut corpus = read(THREE).unwrap();
        assert!(validate(&corpus, &["bertscore"]).is_empty());
        corpus.records[0].token_probs[0] = 1.5;
        corpus.records[1].similarity.clear();
        let findings = validate(&corpus, &["bertscore"]);
        assert_eq!(findings.len(), 2);
        assert_eq!(findings[0].rule, FindingRule::ProbabilityOutOfRange);
        assert_eq!(findings[0].rule.to_string(), "probability out of range");
        assert_eq!(findings[1].id, "b");
        assert_eq!(findings[1].rule, FindingRule::MissingMetric);
    }

    #[test]
    fn validate_flags_duplicates() {
        let mut corpus = read(THREE).unwrap();
        corpus.records[2].id = "a".into();
        let findings = validate(&corpus, &[]);
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].rule, FindingRule::DuplicateId);
    }

    #[test]
    fn ratings_accept_three_in_range() {
        let text = r#"{"id":"m1","metric_values":{"bertscore":0.5},"ratings":[3,4,3]}"#;
        let ratings = read_ratings(text.as_bytes(), "mem").unwrap();
        assert!((ratings[0].mean_rating() - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ratings_wrong_count() {
        let text = r#"{"id":"m1","metric_values":{},"ratings":[3,4]}"#;
        let err = read_ratings(text.as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("expected 3 ratings"), "{err}");
    }

    #[test]
    fn ratings_out_of_range() {
        for bad in ["[3,4,5]", "[0,1,2]", "[-1,2,3]"] {
            let text = format!(r#"{{"id":"m1","metric_values":{{}},"ratings":{bad}}}"#);
            let err = read_ratings(text.as_bytes(), "mem").unwrap_err();
            assert!(err.to_string().contains("outside 1..=4"), "{err}");
        }
    }

    fn arb_record() -> impl Strategy<Value = SummaryRecord> {
        (
            "[a-z]{1,4}",
            proptest::collection::vec(1e-9f64..=1.0, 1..12),
            proptest::collection::btree_map("[a-z]{2,6}", -1.0f64..1.0, 0..3),
            proptest::option::of("[ -~]{0,16}"),
        )
            .prop_map(|(repo, token_probs, similarity, summary_text)| SummaryRecord {
                id: String::new(),
                repo,
                tags: BTreeMap::new(),
                token_probs,
                similarity,
                summary_text,
                reference_text: None,
            })
    }

    proptest! {
        #[test]
        fn write_then_read_round_trips(mut records in proptest::collection::vec(arb_record(), 0..8)) {
            for (i, r) in records.iter_mut().enumerate() {
                r.id = format!("rec-{i}");
            }
            let corpus = Corpus::new(records, "mem");
            let mut buf = Vec::new();
            corpus.write_jsonl(&mut buf).unwrap();
            let back = read_records(buf.as_slice(), "mem").unwrap();
            prop_assert_eq!(back.records, corpus.records);
        }
    }
}
