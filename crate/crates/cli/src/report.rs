//! Report emission: stable-named CSV tables and SVG line charts.
//!
//! Every emitted byte is a pure function of the report contents; numbers are
//! formatted through fixed rules so identical reports produce identical
//! files. Wall-clock timestamps go to the sidecar file and nowhere else.

use crate::artifacts::{write_json, RunDirs};
use crate::error::Result;
use crate::experiment::{LatencyRow, RunReport};
use csv::WriterBuilder;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Fixed-point with six digits: accuracy-like values in [0,1].
fn acc(v: f64) -> String {
    format!("{v:.6}")
}

/// Shortest round-trip form: theory magnitudes span many decades.
fn num(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = WriterBuilder::new().from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every report artifact under the run directory and returns the
/// emitted paths. Empty sections still produce their header-only CSVs so
/// file names stay stable; the SVG charts are only emitted for sections
/// that have at least one series.
pub fn emit_report(dirs: &RunDirs, report: &RunReport) -> Result<Vec<PathBuf>> {
    dirs.ensure()?;
    let mut files = Vec::new();

    let path = dirs.robust_accuracy_csv();
    write_csv(
        &path,
        &["defense", "attack", "budget", "robust_accuracy"],
        &report
            .accuracy
            .iter()
            .map(|r| {
                vec![
                    r.defense.clone(),
                    r.attack.clone(),
                    r.budget.to_string(),
                    acc(r.robust_accuracy),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    files.push(path);

    let path = dirs.root().join("clean_accuracy.csv");
    write_csv(
        &path,
        &["defense", "accuracy"],
        &report
            .clean
            .iter()
            .map(|r| vec![r.defense.clone(), acc(r.robust_accuracy)])
            .collect::<Vec<_>>(),
    )?;
    files.push(path);

    for curve in &report.curves {
        let path = dirs.convergence_csv(&curve.defense);
        write_csv(
            &path,
            &["query_index", "robust_accuracy"],
            &curve
                .points
                .iter()
                .enumerate()
                .map(|(q, &v)| vec![q.to_string(), acc(v)])
                .collect::<Vec<_>>(),
        )?;
        files.push(path);
    }

    for set in &report.traces {
        let path = dirs.trace_csv(&set.attack);
        write_csv(
            &path,
            &["image_id", "query_index", "margin_or_distance", "accepted", "norm"],
            &set.rows
                .iter()
                .map(|r| {
                    vec![
                        r.image_id.to_string(),
                        r.query_index.to_string(),
                        num(r.margin_or_distance),
                        r.accepted.to_string(),
                        num(r.norm),
                    ]
                })
                .collect::<Vec<_>>(),
        )?;
        files.push(path);
    }

    let path = dirs.latency_csv();
    write_csv(
        &path,
        &["mode", "pool_size", "median_ns", "p90_ns", "encoder_pixels"],
        &report
            .latency
            .iter()
            .map(|r| {
                vec![
                    r.mode.clone(),
                    r.pool_size.to_string(),
                    r.median_ns.to_string(),
                    r.p90_ns.to_string(),
                    r.encoder_pixels.to_string(),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    files.push(path);

    for (path, rows) in [
        (dirs.theorem1_csv(), &report.theorem1),
        (dirs.theorem2_csv(), &report.theorem2),
    ] {
        write_csv(
            &path,
            &["experiment", "config_id", "K", "nu_hat", "measured", "bound", "pass"],
            &rows
                .iter()
                .map(|r| {
                    vec![
                        r.experiment.clone(),
                        r.config_id.clone(),
                        r.k.to_string(),
                        num(r.nu_hat),
                        num(r.measured),
                        num(r.bound),
                        r.pass.to_string(),
                    ]
                })
                .collect::<Vec<_>>(),
        )?;
        files.push(path);
    }

    if !report.notes.is_empty() {
        let path = dirs.theory_notes();
        fs::write(&path, report.notes.join("\n") + "\n")?;
        files.push(path);
    }

    if !report.curves.is_empty() {
        let series: Vec<(String, Vec<(f64, f64)>)> = report
            .curves
            .iter()
            .map(|c| {
                (
                    c.defense.clone(),
                    c.points
                        .iter()
                        .enumerate()
                        .map(|(q, &v)| (q as f64, v))
                        .collect(),
                )
            })
            .collect();
        let svg = line_chart(
            "robust accuracy vs queries",
            "queries",
            "robust accuracy",
            &series,
            Some((0.0, 1.0)),
        );
        let path = dirs.convergence_svg();
        fs::write(&path, svg)?;
        files.push(path);
    }

    if !report.latency.is_empty() {
        let series = latency_series(&report.latency);
        let svg = line_chart(
            "median inference latency vs pool size",
            "pool size",
            "median latency [us]",
            &series,
            None,
        );
        let path = dirs.latency_svg();
        fs::write(&path, svg)?;
        files.push(path);
    }

    files.sort();
    let path = dirs.run_meta();
    write_json(
        &path,
        &RunMeta {
            provenance: &report.provenance,
            cells_failed: report.cell_errors.len(),
            files: files
                .iter()
                .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
                .collect(),
        },
    )?;
    files.push(path);
    Ok(files)
}

#[derive(Serialize)]
struct RunMeta<'a> {
    provenance: &'a crate::experiment::Provenance,
    cells_failed: usize,
    files: Vec<String>,
}

/// The only nondeterministic artifact: when the report was written.
pub fn write_sidecar(dirs: &RunDirs) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    write_json(&dirs.sidecar(), &serde_json::json!({ "written_unix_ms": now }))
}

fn latency_series(rows: &[LatencyRow]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let point = (r.pool_size as f64, r.median_ns as f64 / 1000.0);
        match series.iter_mut().find(|(name, _)| *name == r.mode) {
            Some((_, pts)) => pts.push(point),
            None => series.push((r.mode.clone(), vec![point])),
        }
    }
    for (_, pts) in &mut series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    series
}

// --------------------------------------------------------------------- svg --

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 48.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// A fixed-layout line chart: one polyline per series, labeled axes with
/// four ticks each, and a legend. `y_range` pins the axis (e.g. [0,1] for
/// accuracies); otherwise it spans the data with a little headroom.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    y_range: Option<(f64, f64)>,
) -> String {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    let (x_min, x_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let (x_min, x_max) = if x_min < x_max { (x_min, x_max) } else { (0.0, 1.0) };
    let (y_min, y_max) = y_range.unwrap_or_else(|| {
        let hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if hi > 0.0 {
            (0.0, hi * 1.05)
        } else {
            (0.0, 1.0)
        }
    });

    let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        esc(title)
    ));

    // Axes.
    out.push_str(&format!(
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    out.push_str(&format!(
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L, MARGIN_T, MARGIN_L,
        HEIGHT - MARGIN_B
    ));

    // Ticks and grid labels.
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x_min + f * (x_max - x_min);
        let x = px(xv);
        out.push_str(&format!(
            "  <line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0
        ));
        out.push_str(&format!(
            "  <text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_B + 18.0,
            esc(&fmt_tick(xv))
        ));
        let yv = y_min + f * (y_max - y_min);
        let y = py(yv);
        out.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            MARGIN_L - 5.0,
            MARGIN_L
        ));
        out.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0,
            esc(&fmt_tick(yv))
        ));
    }

    // Axis labels.
    out.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 8.0,
        esc(x_label)
    ));
    out.push_str(&format!(
        "  <text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        esc(y_label)
    ));

    // One polyline per series, plus its legend entry.
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        out.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        let ly = MARGIN_T + 14.0 * i as f64 + 8.0;
        out.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_R + 8.0,
            WIDTH - MARGIN_R + 28.0
        ));
        out.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            WIDTH - MARGIN_R + 34.0,
            ly + 4.0,
            esc(name)
        ));
    }

    out.push_str("</svg>\n");
    out
}
