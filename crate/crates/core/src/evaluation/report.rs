//! Results tables and Dice-vs-interaction plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalCase;
use crate::error::Result;
use crate::grid::DiceCurve;

/// One Dice value: a case, a class and an interaction of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub patient_id: String,
    pub slice_idx: usize,
    pub class_id: u8,
    pub interaction: usize,
    pub dice: f64,
}

/// Mean over cases and classes for one (experiment, K, interaction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub interaction: usize,
    pub mean_dice: f64,
    pub n: usize,
}

pub fn curve_rows(experiment: &str, k: usize, case: &EvalCase<'_>, curve: &DiceCurve) -> Vec<ResultRow> {
    let mut rows = Vec::with_capacity(curve.len() * curve.class_ids.len());
    for (i, scores) in curve.interactions().zip(&curve.per_iteration) {
        for (&class_id, &dice) in curve.class_ids.iter().zip(scores) {
            rows.push(ResultRow {
                experiment: experiment.to_string(),
                k,
                patient_id: case.patient_id.to_string(),
                slice_idx: case.slice_idx,
                class_id,
                interaction: i,
                dice,
            });
        }
    }
    rows
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, usize, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = groups.entry((&r.experiment, r.k, r.interaction)).or_default();
        e.0 += r.dice;
        e.1 += 1;
    }
    groups
        .into_iter()
        .map(|((experiment, k, interaction), (sum, n))| SummaryRow {
            experiment: experiment.to_string(),
            k,
            interaction,
            mean_dice: sum / n as f64,
            n,
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    write_csv(path.as_ref(), rows)
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path.as_ref(), rows)
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of mean Dice against interaction, one line per series.
pub fn write_dice_plot_svg(path: impl AsRef<Path>, title: &str, series: &[(String, Vec<(usize, f64)>)]) -> Result<()> {
    let (w, h, margin) = (640.0, 420.0, 55.0);
    let max_x = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let min_y = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
        .fold(1.0f64, f64::min);
    let y_lo = (min_y * 10.0).floor() / 10.0;
    let y_lo = y_lo.clamp(0.0, 0.9);
    let sx = |x: f64| margin + x / max_x * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y_lo) / (1.0 - y_lo) * (h - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let (x0, y0, x1, y1) = (sx(0.0), sy(y_lo), sx(max_x), sy(1.0));
    let _ = writeln!(svg, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#);
    let steps = ((1.0 - y_lo) * 10.0).round() as usize;
    for i in 0..=steps {
        let y = y_lo + i as f64 / 10.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{y:.1}</text>"#,
            x0 - 6.0,
            sy(y) + 4.0
        );
    }
    let tick = if max_x > 10.0 { 5 } else { 1 };
    for x in (0..=max_x as usize).step_by(tick) {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#,
            sx(x as f64),
            y0 + 16.0
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">interaction</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">mean Dice</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x as f64), sy(y.max(y_lo))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            d.join(" ")
        );
        let ly = margin + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - 170.0,
            w - 150.0,
            w - 145.0,
            ly + 4.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
