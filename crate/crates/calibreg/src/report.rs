//! Report emission: full JSON records, long-format metric CSV, per-report
//! reliability CSV, and SVG reliability diagrams.
//!
//! All writers are bit-stable: identical inputs produce byte-identical
//! output, so repeated runs of a deterministic pipeline can be diffed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{csv_number, EvaluationReport};

/// Output formats understood by [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

/// Metric names emitted per report in the long CSV (one row each; metrics
/// without a value leave the value field empty).
pub const CSV_METRICS: [&str; 5] = ["pce", "crps", "nll", "sharpness_std", "pce_p_value"];

/// Writes the long-format metric table: one row per (report, metric) with
/// columns dataset, model, method, seed, metric, value. Non-finite values
/// spell as "inf" / "-inf"; unavailable metrics leave the field empty. The
/// result re-ingests into [`crate::stats::ComparisonMatrix::from_csv`].
pub fn write_metrics_csv<W: Write>(reports: &[EvaluationReport], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["dataset", "model", "method", "seed", "metric", "value"])?;
    for r in reports {
        let values = [
            Some(r.pce),
            Some(r.crps),
            r.nll,
            Some(r.sharpness_std),
            r.pce_p_value,
        ];
        for (metric, value) in CSV_METRICS.iter().zip(values) {
            csv.write_record([
                r.dataset.as_str(),
                r.model.as_str(),
                r.method.as_str(),
                &r.seed.to_string(),
                metric,
                &value.map(csv_number).unwrap_or_default(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Serializes the full report records as a pretty-printed JSON array with a
/// trailing newline.
pub fn write_reports_json<W: Write>(reports: &[EvaluationReport], mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, reports)?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Writes one report's reliability curve as CSV with columns alpha,
/// empirical, band_low, band_high (band columns empty when no band is
/// attached).
pub fn write_reliability_csv<W: Write>(report: &EvaluationReport, writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["alpha", "empirical", "band_low", "band_high"])?;
    let curve = &report.reliability;
    for (j, (&alpha, &emp)) in curve.grid.iter().zip(&curve.empirical).enumerate() {
        let lo = curve.band_low.as_ref().map(|b| csv_number(b[j]));
        let hi = curve.band_high.as_ref().map(|b| csv_number(b[j]));
        csv.write_record([
            csv_number(alpha),
            csv_number(emp),
            lo.unwrap_or_default(),
            hi.unwrap_or_default(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

const SVG_SIZE: f64 = 480.0;
const SVG_MARGIN: f64 = 48.0;

/// Renders a reliability diagram as a standalone SVG string containing the
/// diagonal reference line, exactly one consistency-band polygon (when the
/// curve carries a band), and exactly one empirical polyline.
pub fn reliability_svg(report: &EvaluationReport) -> String {
    let curve = &report.reliability;
    let inner = SVG_SIZE - 2.0 * SVG_MARGIN;
    let px = |alpha: f64| SVG_MARGIN + alpha * inner;
    let py = |value: f64| SVG_MARGIN + (1.0 - value) * inner;
    let point = |alpha: f64, value: f64| format!("{:.3},{:.3}", px(alpha), py(value));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" \
         viewBox=\"0 0 {s} {s}\">\n",
        s = SVG_SIZE
    ));
    svg.push_str(&format!(
        "  <rect width=\"{s}\" height=\"{s}\" fill=\"white\"/>\n",
        s = SVG_SIZE
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.3}\" y=\"{:.3}\" font-size=\"13\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">{}</text>\n",
        SVG_SIZE / 2.0,
        SVG_MARGIN / 2.0,
        xml_escape(&format!(
            "{} | {} | {} | seed {}",
            report.dataset, report.model, report.method, report.seed
        )),
    ));

    if let (Some(lo), Some(hi)) = (&curve.band_low, &curve.band_high) {
        let mut pts = Vec::with_capacity(2 * curve.grid.len());
        for (j, &alpha) in curve.grid.iter().enumerate() {
            pts.push(point(alpha, lo[j]));
        }
        for (j, &alpha) in curve.grid.iter().enumerate().rev() {
            pts.push(point(alpha, hi[j]));
        }
        svg.push_str(&format!(
            "  <polygon class=\"band\" fill=\"#9ecae1\" fill-opacity=\"0.6\" \
             stroke=\"none\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }

    svg.push_str(&format!(
        "  <line class=\"diagonal\" x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" \
         stroke=\"#888888\" stroke-dasharray=\"4 3\"/>\n",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    ));

    let line: Vec<String> = curve
        .grid
        .iter()
        .zip(&curve.empirical)
        .map(|(&alpha, &emp)| point(alpha, emp))
        .collect();
    svg.push_str(&format!(
        "  <polyline class=\"empirical\" fill=\"none\" stroke=\"#08519c\" \
         stroke-width=\"1.5\" points=\"{}\"/>\n",
        line.join(" ")
    ));

    // Axes with end labels.
    svg.push_str(&format!(
        "  <line x1=\"{m:.3}\" y1=\"{b:.3}\" x2=\"{r:.3}\" y2=\"{b:.3}\" stroke=\"black\"/>\n\
         \x20 <line x1=\"{m:.3}\" y1=\"{b:.3}\" x2=\"{m:.3}\" y2=\"{m:.3}\" stroke=\"black\"/>\n",
        m = SVG_MARGIN,
        b = SVG_SIZE - SVG_MARGIN,
        r = SVG_SIZE - SVG_MARGIN,
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.3}\" y=\"{:.3}\" font-size=\"11\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">nominal level</text>\n",
        SVG_SIZE / 2.0,
        SVG_SIZE - SVG_MARGIN / 4.0,
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.3}\" y=\"{:.3}\" font-size=\"11\" text-anchor=\"middle\" \
         font-family=\"sans-serif\" transform=\"rotate(-90 {0:.3} {1:.3})\">empirical \
         coverage</text>\n",
        SVG_MARGIN / 4.0,
        SVG_SIZE / 2.0,
    ));
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reduces a label to a filesystem-safe fragment.
fn sanitize(label: &str) -> String {
    let cleaned: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect();
    if cleaned.is_empty() {
        "unnamed".to_string()
    } else {
        cleaned
    }
}

/// Writes the requested formats under `out_dir` and returns the created
/// paths: `reports.json` (all records), `metrics.csv` (long format), and one
/// `reliability_*.svg` per report. Output is byte-stable in the inputs.
pub fn emit_report(
    reports: &[EvaluationReport],
    out_dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::invalid("emit_report requires at least one report"));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emitted: Vec<ReportFormat> = Vec::new();
    for &format in formats {
        if emitted.contains(&format) {
            continue;
        }
        emitted.push(format);
        match format {
            ReportFormat::Json => {
                let path = out_dir.join("reports.json");
                write_reports_json(reports, fs::File::create(&path)?)?;
                written.push(path);
            }
            ReportFormat::Csv => {
                let path = out_dir.join("metrics.csv");
                write_metrics_csv(reports, fs::File::create(&path)?)?;
                written.push(path);
            }
            ReportFormat::Svg => {
                for r in reports {
                    let path = out_dir.join(format!(
                        "reliability_{}_{}_{}_s{}.svg",
                        sanitize(&r.dataset),
                        sanitize(&r.model),
                        sanitize(&r.method),
                        r.seed
                    ));
                    fs::write(&path, reliability_svg(r))?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}
