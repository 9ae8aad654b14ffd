//! Baseline vs. adapted score distributions and improvement by baseline bin.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptationTrace;
use crate::error::{Error, Result};
use crate::pipeline::io::{write_atomic, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl ScoreSummary {
    fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Self {
            n,
            mean,
            std,
            min: sorted[0],
            median,
            max: sorted[n - 1],
        }
    }
}

/// Half-open bin `[lo, hi)`; a missing bound is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub label: String,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub baseline_count: usize,
    pub final_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinImprovement {
    pub label: String,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub n: usize,
    /// Mean of final minus baseline display score; absent for empty bins.
    pub mean_improvement: Option<f64>,
}

/// All scores are in display units (x100).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub edges: Vec<f64>,
    pub baseline: ScoreSummary,
    #[serde(rename = "final")]
    pub final_: ScoreSummary,
    pub mean_improvement: f64,
    pub histogram: Vec<HistogramBin>,
    pub improvement_by_bin: Vec<BinImprovement>,
}

fn bin_of(v: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| v >= e).count()
}

fn bounds(i: usize, edges: &[f64]) -> (Option<f64>, Option<f64>, String) {
    let lo = i.checked_sub(1).map(|j| edges[j]);
    let hi = edges.get(i).copied();
    let label = match (lo, hi) {
        (None, Some(h)) => format!("<{h}"),
        (Some(l), Some(h)) => format!("{l}-{h}"),
        (Some(l), None) => format!(">={l}"),
        (None, None) => "all".into(),
    };
    (lo, hi, label)
}

/// Summaries, shared-edge histograms and per-bin mean improvement, binned
/// by baseline display score. `edges` must be strictly increasing.
pub fn score_distribution_report(traces: &[AdaptationTrace], edges: &[f64]) -> Result<ScoreReport> {
    if traces.is_empty() {
        return Err(Error::Arity { expected: 1, got: 0 });
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::config("bin edges must be finite and strictly increasing"));
    }
    let base: Vec<f64> = traces.iter().map(|t| t.baseline_score * 100.0).collect();
    let fin: Vec<f64> = traces.iter().map(|t| t.final_score * 100.0).collect();
    let n_bins = edges.len() + 1;
    let mut hist_b = vec![0usize; n_bins];
    let mut hist_f = vec![0usize; n_bins];
    let mut sums = vec![0.0; n_bins];
    for (b, f) in base.iter().zip(&fin) {
        let i = bin_of(*b, edges);
        hist_b[i] += 1;
        hist_f[bin_of(*f, edges)] += 1;
        sums[i] += f - b;
    }
    let histogram = (0..n_bins)
        .map(|i| {
            let (lo, hi, label) = bounds(i, edges);
            HistogramBin {
                label,
                lo,
                hi,
                baseline_count: hist_b[i],
                final_count: hist_f[i],
            }
        })
        .collect();
    let improvement_by_bin = (0..n_bins)
        .map(|i| {
            let (lo, hi, label) = bounds(i, edges);
            BinImprovement {
                label,
                lo,
                hi,
                n: hist_b[i],
                mean_improvement: (hist_b[i] > 0).then(|| sums[i] / hist_b[i] as f64),
            }
        })
        .collect();
    let n = traces.len();
    Ok(ScoreReport {
        n,
        edges: edges.to_vec(),
        baseline: ScoreSummary::of(&base),
        final_: ScoreSummary::of(&fin),
        mean_improvement: fin.iter().zip(&base).map(|(f, b)| f - b).sum::<f64>() / n as f64,
        histogram,
        improvement_by_bin,
    })
}

const PALETTE: [&str; 2] = ["#4c72b0", "#dd8452"];

fn bar_chart_svg(title: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let (w, h) = (720.0, 360.0);
    let (left, right, top, bottom) = (56.0, 16.0, 36.0, 64.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let vals = series.iter().flat_map(|(_, v)| v.iter().copied());
    let hi = vals.clone().fold(0.0f64, f64::max);
    let lo = vals.fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y_of = |v: f64| top + plot_h * (hi - v) / span;
    let group_w = plot_w / labels.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let y0 = y_of(0.0);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}" stroke="black"/>"#,
        w - right
    );
    for (k, v) in [(lo, lo), (hi, hi)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            left - 4.0,
            y_of(k) + 4.0
        );
    }
    for (g, label) in labels.iter().enumerate() {
        let gx = left + g as f64 * group_w + group_w * 0.1;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values[g];
            let (y, bh) = if v >= 0.0 { (y_of(v), y0 - y_of(v)) } else { (y0, y_of(v) - y0) };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{y:.2}" width="{bar_w:.2}" height="{bh:.2}" fill="{}"/>"#,
                gx + si as f64 * bar_w,
                PALETTE[si % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" transform="rotate(-45 {:.2} {:.2})">{}</text>"#,
            gx + group_w * 0.4,
            h - bottom + 14.0,
            gx + group_w * 0.4,
            h - bottom + 14.0,
            label.replace('<', "&lt;").replace('>', "&gt;")
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let x = w - right - 140.0;
        let y = top + 14.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{name}</text>"#,
            y - 9.0,
            PALETTE[si % PALETTE.len()],
            x + 14.0,
            y
        );
    }
    s.push_str("</svg>\n");
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Write `score_report.json`, two CSV tables and two SVG bar charts into `dir`.
pub fn write_score_report(dir: &Path, report: &ScoreReport) -> Result<()> {
    write_json(&dir.join("score_report.json"), report)?;

    let mut csv = String::from("bin,lo,hi,baseline_count,final_count\n");
    for b in &report.histogram {
        let _ = writeln!(csv, "{},{},{},{},{}", b.label, opt(b.lo), opt(b.hi), b.baseline_count, b.final_count);
    }
    write_atomic(&dir.join("score_histogram.csv"), csv.as_bytes())?;

    let mut csv = String::from("bin,lo,hi,n,mean_improvement\n");
    for b in &report.improvement_by_bin {
        let _ = writeln!(csv, "{},{},{},{},{}", b.label, opt(b.lo), opt(b.hi), b.n, opt(b.mean_improvement));
    }
    write_atomic(&dir.join("improvement_by_bin.csv"), csv.as_bytes())?;

    let labels: Vec<String> = report.histogram.iter().map(|b| b.label.clone()).collect();
    let svg = bar_chart_svg(
        "Score distribution",
        &labels,
        &[
            ("baseline", report.histogram.iter().map(|b| b.baseline_count as f64).collect()),
            ("adapted", report.histogram.iter().map(|b| b.final_count as f64).collect()),
        ],
    );
    write_atomic(&dir.join("score_histogram.svg"), svg.as_bytes())?;
    let svg = bar_chart_svg(
        "Mean improvement by baseline score",
        &labels,
        &[(
            "final - baseline",
            report
                .improvement_by_bin
                .iter()
                .map(|b| b.mean_improvement.unwrap_or(0.0))
                .collect(),
        )],
    );
    write_atomic(&dir.join("improvement_by_bin.svg"), svg.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_is_half_open() {
        let e = [5.0, 10.0];
        assert_eq!(bin_of(4.9, &e), 0);
        assert_eq!(bin_of(5.0, &e), 1);
        assert_eq!(bin_of(10.0, &e), 2);
        assert_eq!(bounds(0, &e).2, "<5");
        assert_eq!(bounds(1, &e).2, "5-10");
        assert_eq!(bounds(2, &e).2, ">=10");
    }

    #[test]
    fn summary_stats() {
        let s = ScoreSummary::of(&[3.0, 1.0, 2.0, 4.0]);
        assert_eq!((s.min, s.median, s.max, s.mean), (1.0, 2.5, 4.0, 2.5));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let svg = bar_chart_svg("t", &["a".into(), "<b".into()], &[("x", vec![1.0, -2.0])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("&lt;b"));
    }
}
