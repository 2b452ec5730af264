//! Experiment reports: JSON, text tables and an SVG learning curve.

use std::fmt::Write as _;
use std::path::Path;

use domainsim_core::datasets::SkipReport;
use domainsim_core::evaluation::{render_curve_text, Comparison, ConsistencyReport, CurveRow, EnsembleReport, REPORT_SCHEMA_VERSION, STD_KIND};
use serde::{Deserialize, Serialize};

use crate::experiment::GridConfig;
use crate::files::{self, FileError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateSummary {
    pub condition: String,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_validation_accuracy: Option<f64>,
}

/// Everything a grid run reports. Contains no timings or paths, so reruns
/// with the same config serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub std_kind: String,
    /// Supplied by the config, never computed.
    pub oracle_accuracy: Option<f64>,
    pub config: GridConfig,
    pub vocab_size: usize,
    pub test_pairs: usize,
    pub qa_skipped: SkipReport,
    pub intermediate: Vec<IntermediateSummary>,
    pub reports: Vec<EnsembleReport>,
    pub consistency: Vec<ConsistencyReport>,
    pub comparison: Comparison,
    pub curve: Vec<CurveRow>,
}

impl ExperimentReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: GridConfig,
        vocab_size: usize,
        test_pairs: usize,
        qa_skipped: SkipReport,
        intermediate: Vec<IntermediateSummary>,
        reports: Vec<EnsembleReport>,
        consistency: Vec<ConsistencyReport>,
        comparison: Comparison,
        curve: Vec<CurveRow>,
    ) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            std_kind: STD_KIND.to_string(),
            oracle_accuracy: config.oracle_accuracy,
            config,
            vocab_size,
            test_pairs,
            qa_skipped,
            intermediate,
            reports,
            consistency,
            comparison,
            curve,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn render_text(&self) -> String {
        let mut out = self.comparison.render_text();
        out.push('\n');
        out += &render_curve_text(&self.curve);
        if let Some(o) = self.oracle_accuracy {
            let _ = writeln!(out, "\noracle accuracy: {:.1}%", o * 100.0);
        }
        out.push('\n');
        for (r, c) in self.reports.iter().zip(&self.consistency) {
            let size = r.train_size.map_or(String::new(), |n| format!(" n={n}"));
            let _ = writeln!(
                out,
                "{}{size}: {} consistent errors, {} consistent correct of {} (threshold {}/{})",
                r.condition,
                c.consistent_errors.len(),
                c.consistent_correct.len(),
                c.n,
                c.threshold,
                c.k
            );
        }
        out
    }

    /// Writes `report.json`, `report.txt` and `curve.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), FileError> {
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|source| FileError::Io { path: p, source })
        };
        put("report.json", self.to_json())?;
        put("report.txt", self.render_text())?;
        put("curve.svg", render_curve_svg(&self.curve))
    }

    pub fn load(path: &Path) -> Result<Self, FileError> {
        files::read_json(path)
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean accuracy against train size (log scale), one line per condition,
/// with ±std whiskers. Missing points are skipped.
pub fn render_curve_svg(rows: &[CurveRow]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 130.0, 20.0, 50.0);
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.train_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut conditions: Vec<&str> = Vec::new();
    for r in rows {
        if !conditions.contains(&r.condition.as_str()) {
            conditions.push(&r.condition);
        }
    }
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.mean?, r.std.unwrap_or(0.0)))).collect();
    let lo = pts.iter().map(|(m, s)| m - s).fold(1.0f64, f64::min);
    let hi = pts.iter().map(|(m, s)| m + s).fold(0.0f64, f64::max);
    let (lo, hi) = if pts.is_empty() { (0.0, 1.0) } else { (((lo * 10.0).floor() / 10.0).max(0.0), ((hi * 10.0).ceil() / 10.0).min(1.0)) };
    let (lo, hi) = if hi - lo < 0.1 { (lo, lo + 0.1) } else { (lo, hi) };
    let lx = |n: usize| (n.max(1) as f64).ln();
    let (xmin, xmax) = (sizes.first().map_or(0.0, |&n| lx(n)), sizes.last().map_or(1.0, |&n| lx(n)));
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let x = |n: usize| if xmax > xmin { left + (lx(n) - xmin) / (xmax - xmin) * plot_w } else { left + plot_w / 2.0 };
    let y = |a: f64| top + (hi - a) / (hi - lo) * plot_h;

    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", top + plot_h, left + plot_w, top + plot_h);
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>", top + plot_h);
    let ticks = ((hi - lo) * 10.0).round() as usize;
    for i in 0..=ticks {
        let a = lo + i as f64 / 10.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.0}%</text>", left - 6.0, y(a) + 4.0, a * 100.0);
        let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{0:.1}\" x2=\"{1}\" y2=\"{0:.1}\" stroke=\"#ddd\"/>", y(a), left + plot_w);
    }
    for &n in &sizes {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{n}</text>", x(n), top + plot_h + 18.0);
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">final-task training pairs</text>", left + plot_w / 2.0, h - 10.0);
    for (ci, c) in conditions.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let mut line: Vec<(f64, f64)> = Vec::new();
        let mut cond_rows: Vec<&CurveRow> = rows.iter().filter(|r| r.condition == *c).collect();
        cond_rows.sort_by_key(|r| r.train_size);
        for r in cond_rows {
            let (Some(m), sd) = (r.mean, r.std.unwrap_or(0.0)) else { continue };
            let (px, py) = (x(r.train_size), y(m));
            line.push((px, py));
            let _ = writeln!(s, "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>", y(m - sd), y(m + sd));
            let fill = if r.complete { color } else { "white" };
            let _ = writeln!(s, "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3.5\" fill=\"{fill}\" stroke=\"{color}\"/>");
        }
        if line.len() > 1 {
            let points: Vec<String> = line.iter().map(|(a, b)| format!("{a:.1},{b:.1}")).collect();
            let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", points.join(" "));
        }
        let ly = top + 10.0 + 18.0 * ci as f64;
        let lx0 = left + plot_w + 15.0;
        let _ = writeln!(s, "<line x1=\"{lx0}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>", lx0 + 20.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", lx0 + 26.0, ly + 4.0, escape(c));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
