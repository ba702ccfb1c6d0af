//! Tables and SVG figures.
//!
//! Everything here is a pure function of its inputs; numbers are printed with
//! fixed precision so identical inputs give identical bytes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::PositionSummary;
use crate::correctness::RocCurve;
use crate::metrics::{CalibrationReport, ReliabilityBin};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("no reports to tabulate")]
    Empty,
}

/// Two-decimal rendering, ties to even.
///
/// Rust's fixed-precision float formatting rounds the exact binary value and
/// breaks exact ties toward the even digit, so `0.125` prints as `0.12`.
pub fn round2(x: f64) -> String {
    format!("{x:.2}")
}

fn skill_cell(skill: Option<f64>) -> String {
    skill.map_or_else(|| "undefined".to_string(), round2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub report: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTable {
    pub text: String,
    pub csv: String,
}

const HEADERS: [&str; 5] = ["", "Success Rate", "ECE", "Brier", "Skill score"];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aligned text and CSV with one row per report.
pub fn render_tables(rows: &[TableRow]) -> Result<RenderedTable, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                round2(r.report.success_rate),
                round2(r.report.ece),
                round2(r.report.brier),
                skill_cell(r.report.skill),
            ]
        })
        .collect();
    let mut widths = HEADERS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }

    let mut text = String::new();
    let line = |out: &mut String, row: &[String]| {
        let mut parts = Vec::with_capacity(5);
        parts.push(format!("{:<w$}", row[0], w = widths[0]));
        for (c, w) in row[1..].iter().zip(&widths[1..]) {
            parts.push(format!("{c:>w$}"));
        }
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut text, &HEADERS.map(String::from));
    let rule = widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  ");
    text.push_str(&rule);
    text.push('\n');
    for row in &cells {
        line(&mut text, row);
    }

    let mut csv = String::from("label,success_rate,ece,brier,skill_score\n");
    for row in &cells {
        let fields: Vec<String> = row.iter().map(|c| csv_field(c)).collect();
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    Ok(RenderedTable { text, csv })
}

pub fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width counts on `[0, 1]`, last bin closed; values outside are clamped.
pub fn confidence_histogram(values: impl IntoIterator<Item = f64>, n_bins: usize) -> Vec<HistogramBin> {
    let n_bins = n_bins.max(1);
    let mut counts = vec![0usize; n_bins];
    for v in values {
        let idx = ((v.clamp(0.0, 1.0) * n_bins as f64) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: i as f64 / n_bins as f64,
            hi: (i + 1) as f64 / n_bins as f64,
            count,
        })
        .collect()
}

/// Maps unit-square data coordinates into a pixel rectangle.
#[derive(Debug, Clone, Copy)]
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.left + v.clamp(0.0, 1.0) * self.width
    }

    fn y(&self, v: f64) -> f64 {
        self.top + (1.0 - v.clamp(0.0, 1.0)) * self.height
    }

    fn bottom(&self) -> f64 {
        self.top + self.height
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333" stroke-width="1"/>"##,
            self.left, self.top, self.width, self.height
        );
        for i in 0..=5 {
            let v = i as f64 / 5.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{v:.1}</text>"#,
                self.x(v),
                self.bottom() + 14.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            self.left + self.width / 2.0,
            self.bottom() + 30.0,
            escape_xml(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            self.left - 34.0,
            self.top + self.height / 2.0,
            self.left - 34.0,
            self.top + self.height / 2.0,
            escape_xml(y_label)
        );
    }

    fn y_ticks(&self, out: &mut String) {
        for i in 0..=5 {
            let v = i as f64 / 5.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{v:.1}</text>"#,
                self.left - 4.0,
                self.y(v) + 3.0
            );
        }
    }
}

fn svg_open(out: &mut String, width: u32, height: u32, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape_xml(title));
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        f64::from(width) / 2.0,
        escape_xml(title)
    );
}

/// Two panels: confidence histogram above a reliability diagram.
///
/// Reliability bars rise to each non-empty bin's accuracy; a dot marks
/// (mean confidence, accuracy), which lies on the dashed diagonal when the bin
/// is perfectly calibrated. Empty bins draw nothing.
pub fn render_reliability(bins: &[ReliabilityBin], histogram: &[HistogramBin], title: &str) -> String {
    let mut out = String::new();
    svg_open(&mut out, 420, 600, title);

    let hist = Frame {
        left: 60.0,
        top: 40.0,
        width: 320.0,
        height: 120.0,
    };
    let max_count = histogram.iter().map(|h| h.count).max().unwrap_or(0).max(1) as f64;
    let _ = writeln!(out, r#"<g class="histogram">"#);
    for h in histogram.iter().filter(|h| h.count > 0) {
        let frac = h.count as f64 / max_count;
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#8da0cb" stroke="#333" stroke-width="0.5" data-count="{}"/>"##,
            hist.x(h.lo),
            hist.y(frac),
            hist.x(h.hi) - hist.x(h.lo),
            hist.bottom() - hist.y(frac),
            h.count
        );
    }
    let _ = writeln!(out, "</g>");
    hist.axes(&mut out, "", "Count (relative)");
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#,
        hist.left - 4.0,
        hist.top + 3.0,
        max_count as usize
    );

    let rel = Frame {
        left: 60.0,
        top: 220.0,
        width: 320.0,
        height: 320.0,
    };
    let _ = writeln!(
        out,
        r##"<line class="diagonal" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
        rel.x(0.0),
        rel.y(0.0),
        rel.x(1.0),
        rel.y(1.0)
    );
    let _ = writeln!(out, r#"<g class="reliability">"#);
    for (i, b) in bins.iter().enumerate().filter(|(_, b)| b.count > 0) {
        let _ = writeln!(
            out,
            r##"<rect class="bar" data-bin="{i}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#66c2a5" fill-opacity="0.8" stroke="#333" stroke-width="0.5"/>"##,
            rel.x(b.lo),
            rel.y(b.accuracy),
            rel.x(b.hi) - rel.x(b.lo),
            rel.bottom() - rel.y(b.accuracy)
        );
        let _ = writeln!(
            out,
            r##"<circle class="gap" data-bin="{i}" cx="{:.2}" cy="{:.2}" r="3" fill="#fc8d62"/>"##,
            rel.x(b.mean_confidence),
            rel.y(b.accuracy)
        );
    }
    let _ = writeln!(out, "</g>");
    rel.axes(&mut out, "Confidence", "Accuracy");
    rel.y_ticks(&mut out);
    out.push_str("</svg>\n");
    out
}

/// Box plot of token probability by position bucket.
pub fn render_position_boxplot(profile: &[PositionSummary], title: &str) -> String {
    let mut out = String::new();
    let buckets = profile.len().max(1);
    let plot_width = (buckets as f64 * 16.0).clamp(320.0, 960.0);
    let width = (plot_width + 100.0) as u32;
    svg_open(&mut out, width, 380, title);
    let frame = Frame {
        left: 60.0,
        top: 40.0,
        width: plot_width,
        height: 280.0,
    };
    let slot = plot_width / buckets as f64;
    let box_w = slot * 0.6;
    let _ = writeln!(out, r#"<g class="boxes">"#);
    for (i, p) in profile.iter().enumerate() {
        let Some(s) = p.stats else { continue };
        let cx = frame.left + slot * (i as f64 + 0.5);
        let _ = writeln!(
            out,
            r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#333"/>"##,
            frame.y(s.max),
            frame.y(s.min)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{box_w:.2}" height="{:.2}" fill="#8da0cb" stroke="#333" data-first="{}" data-count="{}"/>"##,
            cx - box_w / 2.0,
            frame.y(s.q3),
            frame.y(s.q1) - frame.y(s.q3),
            p.first_position,
            p.count
        );
        let _ = writeln!(
            out,
            r##"<line class="median" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-width="2"/>"##,
            cx - box_w / 2.0,
            frame.y(s.median),
            cx + box_w / 2.0,
            frame.y(s.median)
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
        frame.left, frame.top, frame.width, frame.height
    );
    frame.y_ticks(&mut out);
    let label_every = buckets.div_ceil(20).max(1);
    for (i, p) in profile.iter().enumerate().filter(|(i, _)| i % label_every == 0) {
        let label = if p.first_position == p.last_position {
            p.first_position.to_string()
        } else {
            format!("{}-{}", p.first_position, p.last_position)
        };
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{label}</text>"#,
            frame.left + slot * (i as f64 + 0.5),
            frame.bottom() + 14.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">Token position</text>"#,
        frame.left + frame.width / 2.0,
        frame.bottom() + 32.0
    );
    out.push_str("</svg>\n");
    out
}

/// ROC curve with the chance diagonal and AUC annotation.
pub fn render_roc(curve: &RocCurve, title: &str) -> String {
    let mut out = String::new();
    svg_open(&mut out, 420, 420, title);
    let frame = Frame {
        left: 60.0,
        top: 40.0,
        width: 320.0,
        height: 320.0,
    };
    let _ = writeln!(
        out,
        r##"<line class="diagonal" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
        frame.x(0.0),
        frame.y(0.0),
        frame.x(1.0),
        frame.y(1.0)
    );
    let points: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", frame.x(p.fpr), frame.y(p.tpr)))
        .collect();
    let _ = writeln!(
        out,
        r##"<polyline class="roc" points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">AUC = {:.3}</text>"#,
        frame.x(1.0) - 6.0,
        frame.y(0.0) - 8.0,
        curve.auc
    );
    frame.axes(&mut out, "False positive rate", "True positive rate");
    frame.y_ticks(&mut out);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::FiveNumber;
    use crate::correctness::roc_from_scores;
    use crate::metrics::{calibration_report, reliability_bins, LabeledSample};

    fn report(success_rate: f64, ece: f64, brier: f64, skill: Option<f64>) -> CalibrationReport {
        CalibrationReport {
            n: 100,
            success_rate,
            brier,
            ref_brier: success_rate * (1.0 - success_rate),
            skill,
            ece,
            bins: Vec::new(),
        }
    }

    #[test]
    fn rounding_ties_to_even() {
        assert_eq!(round2(0.1049), "0.10");
        assert_eq!(round2(0.125), "0.12");
        assert_eq!(round2(0.375), "0.38");
        assert_eq!(round2(-0.40), "-0.40");
    }

    #[test]
    fn table_row_matches_published_layout() {
        let rows = [TableRow {
            label: "Java CodeLlama-70b-hf".into(),
            report: report(0.26, 0.31, 0.27, Some(-0.40)),
        }];
        let t = render_tables(&rows).unwrap();
        let lines: Vec<&str> = t.text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("Success Rate") && lines[0].ends_with("Skill score"));
        let cols: Vec<&str> = lines[2].split_whitespace().collect();
        assert_eq!(&cols[cols.len() - 4..], ["0.26", "0.31", "0.27", "-0.40"]);
        assert_eq!(
            t.csv,
            "label,success_rate,ece,brier,skill_score\nJava CodeLlama-70b-hf,0.26,0.31,0.27,-0.40\n"
        );
    }

    #[test]
    fn undefined_skill_and_empty_table() {
        let rows = [TableRow {
            label: "a, \"quoted\"".into(),
            report: report(1.0, 0.0, 0.0, None),
        }];
        let t = render_tables(&rows).unwrap();
        assert!(t.text.contains("undefined"));
        assert!(t.csv.contains("\"a, \"\"quoted\"\"\""));
        assert_eq!(render_tables(&[]), Err(ReportError::Empty));
    }

    fn attr(elem: &str, name: &str) -> f64 {
        let key = format!(" {name}=\"");
        let start = elem.find(&key).unwrap() + key.len();
        let end = start + elem[start..].find('"').unwrap();
        elem[start..end].parse().unwrap()
    }

    fn circles(svg: &str) -> Vec<&str> {
        svg.lines().filter(|l| l.starts_with("<circle")).collect()
    }

    fn diagonal_y_at(svg: &str, x: f64) -> f64 {
        let line = svg.lines().find(|l| l.contains("class=\"diagonal\"")).unwrap();
        let (x1, y1, x2, y2) = (attr(line, "x1"), attr(line, "y1"), attr(line, "x2"), attr(line, "y2"));
        y1 + (x - x1) * (y2 - y1) / (x2 - x1)
    }

    #[test]
    fn perfect_bins_touch_diagonal() {
        let bins: Vec<ReliabilityBin> = (0..10)
            .map(|i| {
                let c = (i as f64 + 0.5) / 10.0;
                ReliabilityBin {
                    lo: i as f64 / 10.0,
                    hi: (i + 1) as f64 / 10.0,
                    count: 10,
                    mean_confidence: c,
                    accuracy: c,
                }
            })
            .collect();
        let svg = render_reliability(&bins, &[], "perfect");
        let dots = circles(&svg);
        assert_eq!(dots.len(), 10);
        for dot in dots {
            let (cx, cy) = (attr(dot, "cx"), attr(dot, "cy"));
            assert!((diagonal_y_at(&svg, cx) - cy).abs() < 0.02, "{dot}");
        }
    }

    #[test]
    fn empty_bins_are_absent_and_finite() {
        let samples = vec![LabeledSample::new("a", "r", 0.95, 1), LabeledSample::new("b", "r", 0.92, 0)];
        let bins = reliability_bins(&samples, 10).unwrap();
        let hist = confidence_histogram(samples.iter().map(|s| s.confidence), 20);
        let svg = render_reliability(&bins, &hist, "sparse");
        assert_eq!(svg.matches("class=\"bar\"").count(), 1);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        assert_eq!(svg, render_reliability(&bins, &hist, "sparse"));
        roxmltree::Document::parse(&svg).unwrap();
    }

    #[test]
    fn overconfident_bars_fall_below_diagonal() {
        // accuracy = confidence^3
        let samples: Vec<_> = (0..1000)
            .map(|i| {
                let c = 0.5 + 0.5 * (i as f64 + 0.5) / 1000.0;
                let hit = ((i * 7919) % 1000) as f64 / 1000.0 < c.powi(3);
                LabeledSample::new(format!("{i}"), "r", c, u8::from(hit))
            })
            .collect();
        let rep = calibration_report(&samples, 10).unwrap();
        let svg = render_reliability(&rep.bins, &[], "over");
        for dot in circles(&svg) {
            if attr(dot, "data-bin") >= 7.0 {
                assert!(attr(dot, "cy") > diagonal_y_at(&svg, attr(dot, "cx")), "{dot}");
            }
        }
    }

    #[test]
    fn boxplot_and_roc_are_valid_xml() {
        let profile = vec![
            PositionSummary {
                first_position: 1,
                last_position: 1,
                count: 3,
                stats: Some(FiveNumber { min: 0.1, q1: 0.2, median: 0.5, q3: 0.7, max: 0.9 }),
            },
            PositionSummary {
                first_position: 2,
                last_position: 2,
                count: 0,
                stats: None,
            },
        ];
        let svg = render_position_boxplot(&profile, "positions <&>");
        roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(svg.matches("class=\"median\"").count(), 1);

        let curve = roc_from_scores(&[(0.1, false), (0.4, true), (0.5, false), (0.8, true)]).unwrap();
        let svg = render_roc(&curve, "roc");
        roxmltree::Document::parse(&svg).unwrap();
        assert!(svg.contains("AUC = 0.750"));
    }

    #[test]
    fn histogram_counts() {
        let h = confidence_histogram([0.0, 0.05, 0.5, 1.0, 1.0], 10);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(h[0].count, 2);
        assert_eq!(h[9].count, 2);
    }
}
