//! Report outputs: metrics JSON, plot-data CSVs, SVG figures and the
//! cross-condition comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use deploygap_core::dataset::Label;
use deploygap_core::json;
use deploygap_core::metrics::{MetricKind, MetricsReport};
use serde::Serialize;

pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_CSV: &str = "comparison.csv";

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn histogram_csv(r: &MetricsReport, path: &Path) -> anyhow::Result<()> {
    let h = &r.histograms;
    let mut rows = Vec::new();
    for (label, counts) in &h.counts {
        for (i, n) in counts.iter().enumerate() {
            rows.push(vec![label.as_str().to_string(), num(h.edges[i]), num(h.edges[i + 1]), n.to_string()]);
        }
    }
    write_csv(path, &["label", "bin_lo", "bin_hi", "count"], rows)
}

pub fn reliability_csv(r: &MetricsReport, path: &Path) -> anyhow::Result<()> {
    let rows = r
        .reliability_bins
        .iter()
        .map(|b| vec![num(b.lo), num(b.hi), opt(b.mean_confidence), opt(b.accuracy), b.count.to_string()])
        .collect();
    write_csv(path, &["bin_lo", "bin_hi", "mean_confidence", "accuracy", "count"], rows)
}

pub fn per_prompt_csv(r: &MetricsReport, path: &Path) -> anyhow::Result<()> {
    let rows = r
        .per_prompt
        .iter()
        .map(|(k, p)| vec![k.clone(), num(p.rate), p.n.to_string()])
        .collect();
    write_csv(path, &["prompt_id", "rate", "n"], rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub condition: String,
    pub eval_mode: String,
    pub source: String,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub fake_to_real_rate: Option<f64>,
    pub ece: f64,
    pub fake_to_real_ci: Option<[f64; 2]>,
    pub auc_ci: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub condition: String,
    pub eval_mode: String,
    pub baseline_eval_mode: String,
    pub auc_drop: Option<f64>,
    pub fake_to_real_increase: Option<f64>,
    pub ece_increase: f64,
    /// `None` when either interval is unavailable.
    pub fake_to_real_cis_overlap: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub table: Vec<TableRow>,
    pub comparisons: Vec<Comparison>,
}

fn ci(r: &MetricsReport, m: MetricKind) -> Option<[f64; 2]> {
    r.cis.get(&m).map(|c| [c.lo, c.hi])
}

fn sub(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Rows for every report; each attacked report is compared against the
/// clean pristine report (laboratory baseline), else any clean report.
pub fn compare(reports: &[(String, MetricsReport)]) -> ComparisonReport {
    let table = reports
        .iter()
        .map(|(src, r)| TableRow {
            condition: r.condition.clone(),
            eval_mode: r.eval_mode.clone(),
            source: src.clone(),
            auc: r.auc,
            accuracy: r.accuracy,
            fake_to_real_rate: r.fake_to_real_rate,
            ece: r.ece,
            fake_to_real_ci: ci(r, MetricKind::FakeToRealRate),
            auc_ci: ci(r, MetricKind::Auc),
        })
        .collect();
    let clean: Vec<&MetricsReport> = reports.iter().map(|(_, r)| r).filter(|r| r.condition == "clean").collect();
    let comparisons = reports
        .iter()
        .map(|(_, r)| r)
        .filter(|r| r.condition != "clean")
        .filter_map(|r| {
            let base = clean
                .iter()
                .find(|c| c.eval_mode == "pristine")
                .or_else(|| clean.first())?;
            let overlap = match (ci(base, MetricKind::FakeToRealRate), ci(r, MetricKind::FakeToRealRate)) {
                (Some(a), Some(b)) => Some(a[0] <= b[1] && b[0] <= a[1]),
                _ => None,
            };
            Some(Comparison {
                condition: r.condition.clone(),
                eval_mode: r.eval_mode.clone(),
                baseline_eval_mode: base.eval_mode.clone(),
                auc_drop: sub(base.auc, r.auc),
                fake_to_real_increase: sub(r.fake_to_real_rate, base.fake_to_real_rate),
                ece_increase: r.ece - base.ece,
                fake_to_real_cis_overlap: overlap,
            })
        })
        .collect();
    ComparisonReport { table, comparisons }
}

pub fn write_comparison(c: &ComparisonReport, dir: &Path) -> anyhow::Result<()> {
    json::write_sorted(&dir.join(COMPARISON_JSON), c)?;
    let pair = |v: Option<[f64; 2]>| v.map_or((String::new(), String::new()), |[a, b]| (num(a), num(b)));
    let rows = c
        .table
        .iter()
        .map(|t| {
            let (f_lo, f_hi) = pair(t.fake_to_real_ci);
            vec![
                t.condition.clone(),
                t.eval_mode.clone(),
                opt(t.auc),
                num(t.accuracy),
                opt(t.fake_to_real_rate),
                num(t.ece),
                f_lo,
                f_hi,
            ]
        })
        .collect();
    write_csv(
        &dir.join(COMPARISON_CSV),
        &["condition", "eval_mode", "auc", "accuracy", "fake_to_real_rate", "ece", "fake_to_real_ci_lo", "fake_to_real_ci_hi"],
        rows,
    )
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

struct Bar {
    label: String,
    value: f64,
    colour: &'static str,
}

/// Bar chart on a fixed [0, y_max] axis.
fn bar_chart(title: &str, y_label: &str, bars: &[Bar], y_max: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    let (x0, y0, pw, ph) = (PAD, H - PAD, W - 2.0 * PAD, H - 2.0 * PAD);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, x0 + pw);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{}" stroke="black"/>"#, y0 - ph);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y0 - ph * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.2}</text>"#, x0 - 4.0, y + 4.0, v);
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    let n = bars.len().max(1) as f64;
    let slot = pw / n;
    for (i, b) in bars.iter().enumerate() {
        let h = if y_max > 0.0 { (b.value / y_max).clamp(0.0, 1.0) * ph } else { 0.0 };
        let x = x0 + slot * i as f64 + slot * 0.1;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            y0 - h,
            slot * 0.8,
            b.colour
        );
        if bars.len() <= 12 {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                x + slot * 0.4,
                y0 + 14.0,
                esc(&b.label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn histogram_svg(r: &MetricsReport) -> String {
    let h = &r.histograms;
    let mut bars = Vec::new();
    for (label, colour) in [(Label::Real, "#4477aa"), (Label::Synthetic, "#cc6677")] {
        if let Some(c) = h.counts.get(&label) {
            for (i, &n) in c.iter().enumerate() {
                bars.push((i, label, n, colour));
            }
        }
    }
    bars.sort_by_key(|b| (b.0, b.1));
    let max = bars.iter().map(|b| b.2).max().unwrap_or(0).max(1) as f64;
    let bars: Vec<Bar> = bars
        .into_iter()
        .map(|(_, _, n, colour)| Bar {
            label: String::new(),
            value: n as f64,
            colour,
        })
        .collect();
    bar_chart(
        &format!("Score histogram ({} / {}): blue real, red synthetic", r.condition, r.eval_mode),
        "count",
        &bars,
        max,
    )
}

pub fn per_prompt_svg(r: &MetricsReport) -> String {
    let bars: Vec<Bar> = r
        .per_prompt
        .iter()
        .map(|(k, p)| Bar {
            label: k.clone(),
            value: p.rate,
            colour: "#cc6677",
        })
        .collect();
    bar_chart(
        &format!("Fake-to-real rate per prompt ({} / {})", r.condition, r.eval_mode),
        "fake-to-real rate",
        &bars,
        1.0,
    )
}

pub fn reliability_svg(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">Reliability ({} / {}), ECE {:.4}</text>"#,
        W / 2.0,
        esc(&r.condition),
        esc(&r.eval_mode),
        r.ece
    );
    let (x0, y0, pw, ph) = (PAD, H - PAD, W - 2.0 * PAD, H - 2.0 * PAD);
    let lo = r.reliability_bins.first().map_or(0.0, |b| b.lo);
    let hi = r.reliability_bins.last().map_or(1.0, |b| b.hi);
    let px = |v: f64| x0 + (v - lo) / (hi - lo) * pw;
    let py = |v: f64| y0 - v * ph;
    let _ = writeln!(s, r#"<rect x="{x0}" y="{}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#, y0 - ph);
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="grey" stroke-dasharray="4"/>"#,
        px(lo),
        py(lo),
        px(hi),
        py(hi)
    );
    for b in &r.reliability_bins {
        if let Some(a) = b.accuracy {
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4477aa" fill-opacity="0.7"/>"##,
                px(b.lo),
                py(a),
                px(b.hi) - px(b.lo),
                a * ph
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">confidence</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{lo:.2}</text>"#, px(lo) + 8.0, y0 + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.2}</text>"#, px(hi), y0 + 14.0);
    s.push_str("</svg>\n");
    s
}

pub fn comparison_svg(c: &ComparisonReport) -> String {
    let bars: Vec<Bar> = c
        .table
        .iter()
        .filter_map(|t| {
            Some(Bar {
                label: format!("{}/{}", t.condition, t.eval_mode),
                value: t.fake_to_real_rate?,
                colour: match t.condition.as_str() {
                    "clean" => "#999933",
                    "per_image" => "#cc6677",
                    _ => "#882255",
                },
            })
        })
        .collect();
    bar_chart("Fake-to-real rate by condition", "fake-to-real rate", &bars, 1.0)
}

/// Writes the per-set outputs into `dir`. Figure failures only warn.
pub fn write_set(r: &MetricsReport, dir: &Path, figures: bool) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    json::write_sorted(&dir.join("metrics.json"), r)?;
    histogram_csv(r, &dir.join("histogram.csv"))?;
    reliability_csv(r, &dir.join("reliability.csv"))?;
    per_prompt_csv(r, &dir.join("per_prompt.csv"))?;
    if figures {
        write_figures(
            dir,
            &[
                ("histogram.svg", histogram_svg(r)),
                ("reliability.svg", reliability_svg(r)),
                ("per_prompt.svg", per_prompt_svg(r)),
            ],
        );
    }
    Ok(())
}

pub fn write_figures(dir: &Path, figs: &[(&str, String)]) {
    for (name, svg) in figs {
        let path: PathBuf = dir.join(name);
        if let Err(e) = std::fs::write(&path, svg) {
            eprintln!("warning: could not render {}: {e}; CSV data is still available", path.display());
        }
    }
}

/// Directory name for a report, unique among `taken`.
pub fn set_dir_name(r: &MetricsReport, taken: &mut BTreeMap<String, usize>) -> String {
    let base = format!("{}_{}", r.condition, r.eval_mode);
    let n = taken.entry(base.clone()).or_insert(0);
    *n += 1;
    if *n == 1 {
        base
    } else {
        format!("{base}_{n}")
    }
}
