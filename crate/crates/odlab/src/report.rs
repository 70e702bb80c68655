//! Result reporting: comparison tables, plot data and minimal SVG charts.

use crate::error::{Error, Result};
use crate::io;
use crate::metrics;
use crate::model::{
    production_attraction, to_distribution, DistributionSource, FlowKind, GlobalDistribution,
    OdSequence,
};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// One row of the distribution-divergence table: how far the inferred and the
/// optimized distributions of one flow kind are from the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceRow {
    pub kind: FlowKind,
    pub inferred_vs_true: Option<f64>,
    pub optimized_vs_true: f64,
}

/// KL divergences of the estimate's (and optionally the inferred) global
/// distributions against the truth's, one row per flow kind.
pub fn divergence_table(
    truth: &OdSequence,
    estimate: &OdSequence,
    inferred: Option<(&GlobalDistribution, &GlobalDistribution)>,
) -> Result<Vec<DivergenceRow>> {
    let (tp, ta) = production_attraction(truth);
    let (ep, ea) = production_attraction(estimate);
    let truth_p = to_distribution(&tp, FlowKind::Production, DistributionSource::True)?;
    let truth_a = to_distribution(&ta, FlowKind::Attraction, DistributionSource::True)?;
    let est_p = to_distribution(&ep, FlowKind::Production, DistributionSource::Optimized)?;
    let est_a = to_distribution(&ea, FlowKind::Attraction, DistributionSource::Optimized)?;
    let row = |kind: FlowKind,
               truth_d: &GlobalDistribution,
               est_d: &GlobalDistribution,
               inf_d: Option<&GlobalDistribution>|
     -> Result<DivergenceRow> {
        Ok(DivergenceRow {
            kind,
            inferred_vs_true: match inf_d {
                Some(d) => Some(metrics::kl(d.values(), truth_d.values())?),
                None => None,
            },
            optimized_vs_true: metrics::kl(est_d.values(), truth_d.values())?,
        })
    };
    Ok(vec![
        row(FlowKind::Production, &truth_p, &est_p, inferred.map(|(p, _)| p))?,
        row(FlowKind::Attraction, &truth_a, &est_a, inferred.map(|(_, a)| a))?,
    ])
}

fn kind_name(kind: FlowKind) -> &'static str {
    match kind {
        FlowKind::Production => "production",
        FlowKind::Attraction => "attraction",
    }
}

pub fn save_divergence_table(path: &Path, rows: &[DivergenceRow]) -> Result<()> {
    let mut out = String::from("kind,inferred_vs_true,optimized_vs_true\n");
    for row in rows {
        match row.inferred_vs_true {
            Some(v) => writeln!(out, "{},{v},{}", kind_name(row.kind), row.optimized_vs_true),
            None => writeln!(out, "{},,{}", kind_name(row.kind), row.optimized_vs_true),
        }
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-node time series of several distributions side by side:
/// `interval,node,<label>...` with one value column per labeled distribution.
pub fn save_node_series(
    path: &Path,
    n_od: usize,
    series: &[(&str, &GlobalDistribution)],
) -> Result<()> {
    let Some((_, first)) = series.first() else {
        return Err(Error::InvalidConfig("node series needs at least one distribution".into()));
    };
    if n_od == 0 || first.len() % n_od != 0 {
        return Err(Error::ShapeMismatch(format!(
            "distribution of length {} does not factor into {n_od} nodes",
            first.len()
        )));
    }
    if series.iter().any(|(_, d)| d.len() != first.len()) {
        return Err(Error::ShapeMismatch("node series lengths differ".into()));
    }
    let mut out = String::from("interval,node");
    for (label, _) in series {
        write!(out, ",{label}").unwrap();
    }
    out.push('\n');
    for c in 0..first.len() {
        write!(out, "{},{}", c / n_od, c % n_od).unwrap();
        for (_, d) in series {
            write!(out, ",{}", d.values()[c]).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Estimated-versus-true cell values, one row per OD pair and interval.
pub fn save_scatter(path: &Path, truth: &OdSequence, estimate: &OdSequence) -> Result<()> {
    if truth.intervals() != estimate.intervals() || truth.n_od() != estimate.n_od() {
        return Err(Error::ShapeMismatch("scatter needs equal shapes".into()));
    }
    let n = truth.n_od();
    let mut out = String::from("interval,origin,destination,truth,estimate\n");
    for t in 0..truth.intervals() {
        for i in 0..n {
            for j in 0..n {
                writeln!(out, "{t},{i},{j},{},{}", truth.get(t, i, j), estimate.get(t, i, j))
                    .unwrap();
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// minimal SVG rendering

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 420.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Frame {
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl Frame {
    fn from_points<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut frame =
            Frame { min_x: f64::INFINITY, max_x: f64::NEG_INFINITY, min_y: f64::INFINITY, max_y: f64::NEG_INFINITY };
        for (x, y) in points {
            frame.min_x = frame.min_x.min(*x);
            frame.max_x = frame.max_x.max(*x);
            frame.min_y = frame.min_y.min(*y);
            frame.max_y = frame.max_y.max(*y);
        }
        if !frame.min_x.is_finite() {
            frame = Frame { min_x: 0.0, max_x: 1.0, min_y: 0.0, max_y: 1.0 };
        }
        if frame.max_x == frame.min_x {
            frame.max_x += 1.0;
        }
        if frame.max_y == frame.min_y {
            frame.max_y += 1.0;
        }
        frame
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = MARGIN + (x - self.min_x) / (self.max_x - self.min_x) * (CHART_W - 2.0 * MARGIN);
        let sy = CHART_H - MARGIN
            - (y - self.min_y) / (self.max_y - self.min_y) * (CHART_H - 2.0 * MARGIN);
        (sx, sy)
    }
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" \
         viewBox=\"0 0 {CHART_W} {CHART_H}\">\n\
         <rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        CHART_W / 2.0
    )
}

fn svg_axes(frame: &Frame) -> String {
    let (x0, y0) = frame.map(frame.min_x, frame.min_y);
    let (x1, _) = frame.map(frame.max_x, frame.min_y);
    let (_, y1) = frame.map(frame.min_x, frame.max_y);
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{x0}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
         text-anchor=\"end\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{y0}\" font-family=\"sans-serif\" font-size=\"10\">{:.3}</text>\n",
        y0 + 14.0,
        frame.min_x,
        x1,
        y0 + 14.0,
        frame.max_x,
        x0 - 40.0,
        frame.max_y,
    )
}

/// A labeled polyline of a line chart.
pub struct LineSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Render labeled line series into a self-contained SVG document.
pub fn line_chart_svg(title: &str, series: &[LineSeries]) -> String {
    let frame = Frame::from_points(series.iter().flat_map(|s| s.points.iter()));
    let mut out = svg_open(title);
    out.push_str(&svg_axes(&frame));
    for (index, line) in series.iter().enumerate() {
        let color = PALETTE[index % PALETTE.len()];
        let coords: Vec<String> = line
            .points
            .iter()
            .map(|(x, y)| {
                let (sx, sy) = frame.map(*x, *y);
                format!("{sx:.2},{sy:.2}")
            })
            .collect();
        writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.join(" ")
        )
        .unwrap();
        writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"{color}\">{}</text>",
            CHART_W - MARGIN - 110.0,
            35.0 + 14.0 * index as f64,
            line.label
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// Render an x-y scatter with the identity diagonal into an SVG document.
pub fn scatter_svg(title: &str, points: &[(f64, f64)]) -> String {
    let frame = Frame::from_points(points.iter());
    let mut out = svg_open(title);
    out.push_str(&svg_axes(&frame));
    let lo = frame.min_x.max(frame.min_y);
    let hi = frame.max_x.min(frame.max_y);
    if hi > lo {
        let (x0, y0) = frame.map(lo, lo);
        let (x1, y1) = frame.map(hi, hi);
        writeln!(
            out,
            "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y1:.2}\" \
             stroke=\"#999999\" stroke-dasharray=\"4 3\"/>"
        )
        .unwrap();
    }
    for (x, y) in points {
        let (sx, sy) = frame.map(*x, *y);
        writeln!(
            out,
            "<circle cx=\"{sx:.2}\" cy=\"{sy:.2}\" r=\"2.5\" fill=\"#1f77b4\" \
             fill-opacity=\"0.6\"/>"
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// Write the full report for one estimate: metric summary, divergence table,
/// per-node distribution series with charts, and the cell scatter with chart.
/// Returns the paths written.
pub fn write_report(
    dir: &Path,
    truth: &OdSequence,
    estimate: &OdSequence,
    inferred: Option<(&GlobalDistribution, &GlobalDistribution)>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let n = truth.n_od();

    let summary = metrics::summary(truth, estimate)?;
    let path = dir.join("summary.csv");
    io::save_summary(&path, &summary)?;
    written.push(path);
    let path = dir.join("summary.txt");
    fs::write(&path, io::format_summary(&summary))?;
    written.push(path);

    let rows = divergence_table(truth, estimate, inferred)?;
    let path = dir.join("divergence.csv");
    save_divergence_table(&path, &rows)?;
    written.push(path);

    let (tp, ta) = production_attraction(truth);
    let (ep, ea) = production_attraction(estimate);
    let truth_p = to_distribution(&tp, FlowKind::Production, DistributionSource::True)?;
    let truth_a = to_distribution(&ta, FlowKind::Attraction, DistributionSource::True)?;
    let est_p = to_distribution(&ep, FlowKind::Production, DistributionSource::Optimized)?;
    let est_a = to_distribution(&ea, FlowKind::Attraction, DistributionSource::Optimized)?;

    for (kind, truth_d, est_d, inf_d) in [
        (FlowKind::Production, &truth_p, &est_p, inferred.map(|(p, _)| p)),
        (FlowKind::Attraction, &truth_a, &est_a, inferred.map(|(_, a)| a)),
    ] {
        let mut series: Vec<(&str, &GlobalDistribution)> =
            vec![("true", truth_d), ("optimized", est_d)];
        if let Some(d) = inf_d {
            series.push(("inferred", d));
        }
        let name = kind_name(kind);
        let path = dir.join(format!("node_series_{name}.csv"));
        save_node_series(&path, n, &series)?;
        written.push(path);

        let lines: Vec<LineSeries> = series
            .iter()
            .map(|(label, d)| LineSeries {
                label: (*label).to_string(),
                points: d
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (c as f64, *v))
                    .collect(),
            })
            .collect();
        let path = dir.join(format!("node_series_{name}.svg"));
        fs::write(&path, line_chart_svg(&format!("{name} distribution"), &lines))?;
        written.push(path);
    }

    let path = dir.join("scatter.csv");
    save_scatter(&path, truth, estimate)?;
    written.push(path);
    let points: Vec<(f64, f64)> = truth
        .flat()
        .iter()
        .zip(estimate.flat())
        .map(|(t, e)| (*t, *e))
        .collect();
    let path = dir.join("scatter.svg");
    fs::write(&path, scatter_svg("estimated vs true cells", &points))?;
    written.push(path);

    Ok(written)
}
