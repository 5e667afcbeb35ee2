//! CSV and SVG renderings of the analysis results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Deserialize;

use super::{CorrelationReport, LooSummary, Reference, Trend};
use crate::error::{Error, Result};
use crate::probing::GridCell;

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

/// Long-format correlation table. Taps in `report.taps..columns` are N/A.
pub fn correlation_csv(report: &CorrelationReport, columns: usize) -> Result<String> {
    let mut w = writer();
    w.write_record(["dataset", "key", "tap", "r", "p", "n", "stars"]).map_err(csv_err)?;
    let mut keys: Vec<&str> = Vec::new();
    for e in &report.entries {
        if !keys.contains(&e.key.as_str()) {
            keys.push(&e.key);
        }
    }
    for key in keys {
        for tap in 0..columns.max(report.taps) {
            let tap_s = tap.to_string();
            let row = match report.get(key, tap).and_then(|e| e.value) {
                Some(c) => [report.dataset.clone(), key.into(), tap_s, f4(c.r), f4(c.p), c.n.to_string(), c.stars().into()],
                None => [report.dataset.clone(), key.into(), tap_s, "N/A".into(), "N/A".into(), "N/A".into(), String::new()],
            };
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    finish(w)
}

pub fn loo_csv(rows: &[LooSummary]) -> Result<String> {
    let mut w = writer();
    w.write_record(["dataset", "algorithm", "mean", "std", "envs", "formatted"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.dataset.clone(), r.algorithm.clone(), f4(r.mean), f4(r.std), r.envs.to_string(), r.to_string()])
            .map_err(csv_err)?;
    }
    finish(w)
}

pub fn grid_csv(grid: &[GridCell]) -> Result<String> {
    let mut w = writer();
    w.write_record(["algorithm", "tap", "accuracy", "count"]).map_err(csv_err)?;
    for g in grid {
        w.write_record([g.algorithm.clone(), g.tap_index.to_string(), f4(g.accuracy), g.count.to_string()]).map_err(csv_err)?;
    }
    finish(w)
}

pub fn trend_csv(rows: &[(String, Trend, f64)]) -> Result<String> {
    let mut w = writer();
    w.write_record(["algorithm", "trend", "slope"]).map_err(csv_err)?;
    for (a, t, s) in rows {
        w.write_record([a.clone(), t.to_string(), f4(*s)]).map_err(csv_err)?;
    }
    finish(w)
}

#[derive(Deserialize)]
struct ReferenceRow {
    algorithm: String,
    mean: f64,
    std: f64,
}

/// Parses `algorithm,mean,std` rows.
pub fn read_reference_csv(text: &str) -> Result<BTreeMap<String, Reference>> {
    let mut out = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    for row in reader.deserialize::<ReferenceRow>() {
        let row = row.map_err(csv_err)?;
        if !(row.std >= 0.0) {
            return Err(Error::Format(format!("negative std for {}", row.algorithm)));
        }
        if out.insert(row.algorithm.clone(), Reference { mean: row.mean, std: row.std }).is_some() {
            return Err(Error::Format(format!("duplicate reference row for {}", row.algorithm)));
        }
    }
    Ok(out)
}

const CELL: f64 = 56.0;
const LABEL_W: f64 = 96.0;
const TOP: f64 = 28.0;

/// Maps `v` on [lo, 1] to a white-to-blue ramp.
fn color(v: f64, lo: f64) -> String {
    let t = if lo < 1.0 { ((v - lo) / (1.0 - lo)).clamp(0.0, 1.0) } else { 1.0 };
    let ch = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(247.0, 8.0), ch(251.0, 48.0), ch(255.0, 107.0))
}

/// Heatmap of the (algorithm x tap) grid with a colour bar from `lower` to 1.
pub fn grid_svg(grid: &[GridCell], lower: f64) -> String {
    let mut algorithms: Vec<&str> = Vec::new();
    for g in grid {
        if !algorithms.contains(&g.algorithm.as_str()) {
            algorithms.push(&g.algorithm);
        }
    }
    let taps = grid.iter().map(|g| g.tap_index + 1).max().unwrap_or(0);
    let width = LABEL_W + CELL * taps as f64 + 80.0;
    let height = TOP + CELL * algorithms.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    for t in 0..taps {
        let x = LABEL_W + CELL * (t as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">Probe {t}</text>"#, TOP - 8.0);
    }
    for (row, a) in algorithms.iter().enumerate() {
        let y = TOP + CELL * row as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{a}</text>"#, LABEL_W - 6.0, y + CELL / 2.0 + 4.0);
        for g in grid.iter().filter(|g| g.algorithm == *a) {
            let x = LABEL_W + CELL * g.tap_index as f64;
            let fill = color(g.accuracy, lower);
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="white"/>"#);
            let ink = if (g.accuracy - lower) / (1.0 - lower).max(1e-12) > 0.6 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.2}</text>"#,
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0,
                g.accuracy
            );
        }
    }
    // colour bar
    let bx = LABEL_W + CELL * taps as f64 + 16.0;
    let bh = (CELL * algorithms.len() as f64).max(CELL);
    let steps = 20;
    for i in 0..steps {
        let v = 1.0 - (1.0 - lower) * i as f64 / steps as f64;
        let y = TOP + bh * i as f64 / steps as f64;
        let _ = writeln!(s, r#"<rect x="{bx}" y="{y:.2}" width="14" height="{:.2}" fill="{}"/>"#, bh / steps as f64 + 0.5, color(v, lower));
    }
    let _ = writeln!(s, r#"<text class="bar-max" x="{}" y="{}">1.00</text>"#, bx + 18.0, TOP + 10.0);
    let _ = writeln!(s, r#"<text class="bar-min" x="{}" y="{}" data-value="{lower}">{lower:.2}</text>"#, bx + 18.0, TOP + bh);
    s.push_str("</svg>\n");
    s
}
