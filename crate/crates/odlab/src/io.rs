//! File formats of every pipeline artifact.
//!
//! Networks and learner checkpoints are JSON, trip logs are line-delimited
//! JSON, and everything tabular (sequences, counts, distributions, traces,
//! curves, summaries) is plain CSV with a header row. Floats are written with
//! the shortest representation that parses back to the identical bits, so
//! artifacts of a deterministic run are byte-identical across re-runs.

use crate::error::{Error, Result};
use crate::estimator::OuterRecord;
use crate::learner::{EpochStats, LearnerParams};
use crate::metrics::Summary;
use crate::model::{
    CountsDistribution, DistributionSource, FlowKind, GlobalDistribution, Network, OdSequence,
    TrafficCounts,
};
use crate::sampler::{Dataset, Sample};
use crate::sim::TripLog;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Checkpoint format revision.
pub const CHECKPOINT_VERSION: u32 = 1;

fn read(path: &Path, hint: &str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput {
            path: path.display().to_string(),
            hint: hint.to_string(),
        });
    }
    Ok(fs::read_to_string(path)?)
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), msg: msg.into() }
}

fn parse_f64(path: &Path, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, format!("expected a number, got {field:?}")))
}

fn parse_usize(path: &Path, field: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| parse_err(path, format!("expected an index, got {field:?}")))
}

/// Rows of a CSV body (header checked and skipped), split on commas.
fn csv_rows(path: &Path, text: &str, header: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    if first != header {
        return Err(parse_err(path, format!("expected header {header:?}, got {first:?}")));
    }
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|f| f.to_string()).collect())
        .collect())
}

// ---------------------------------------------------------------------------
// network

pub fn save_network(path: &Path, network: &Network) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(network)? + "\n")?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let text = read(path, "generate one with the gen-network command")?;
    let network: Network = serde_json::from_str(&text)?;
    network.validate()?;
    Ok(network)
}

// ---------------------------------------------------------------------------
// demand sequences

fn sequence_header(n_od: usize) -> String {
    let mut h = String::from("interval");
    for i in 0..n_od {
        for j in 0..n_od {
            write!(h, ",od_{i}_{j}").unwrap();
        }
    }
    h
}

pub fn save_sequence(path: &Path, seq: &OdSequence) -> Result<()> {
    let n = seq.n_od();
    let mut out = sequence_header(n);
    out.push('\n');
    for t in 0..seq.intervals() {
        write!(out, "{t}").unwrap();
        for v in seq.interval_slice(t) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_sequence(path: &Path) -> Result<OdSequence> {
    let text = read(path, "produce one with make-truth or estimate")?;
    let first = text.lines().next().unwrap_or("");
    let cols = first.split(',').count();
    if cols < 2 {
        return Err(parse_err(path, "missing demand columns"));
    }
    let n_cells = cols - 1;
    let n_od = (n_cells as f64).sqrt().round() as usize;
    if n_od * n_od != n_cells {
        return Err(parse_err(path, format!("{n_cells} cells is not a square pair count")));
    }
    let rows = csv_rows(path, &text, &sequence_header(n_od))?;
    let mut flat = Vec::with_capacity(rows.len() * n_cells);
    for (t, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(parse_err(path, format!("row {t} has {} fields, expected {cols}", row.len())));
        }
        if parse_usize(path, &row[0])? != t {
            return Err(parse_err(path, format!("interval column out of order at row {t}")));
        }
        for f in &row[1..] {
            flat.push(parse_f64(path, f)?);
        }
    }
    OdSequence::from_flat(rows.len(), n_od, flat)
}

// ---------------------------------------------------------------------------
// section counts

fn counts_header(n_sec: usize) -> String {
    let mut h = String::from("interval");
    for e in 0..n_sec {
        write!(h, ",sec_{e}").unwrap();
    }
    h
}

fn write_counts_table(rows: usize, n_sec: usize, data: &[f64]) -> String {
    let mut out = counts_header(n_sec);
    out.push('\n');
    for tau in 0..rows {
        write!(out, "{tau}").unwrap();
        for e in 0..n_sec {
            write!(out, ",{}", data[tau * n_sec + e]).unwrap();
        }
        out.push('\n');
    }
    out
}

fn read_counts_table(path: &Path, text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let first = text.lines().next().unwrap_or("");
    let cols = first.split(',').count();
    if cols < 2 {
        return Err(parse_err(path, "missing section columns"));
    }
    let n_sec = cols - 1;
    let rows = csv_rows(path, text, &counts_header(n_sec))?;
    let mut data = Vec::with_capacity(rows.len() * n_sec);
    for (tau, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(parse_err(path, format!("row {tau} has {} fields, expected {cols}", row.len())));
        }
        if parse_usize(path, &row[0])? != tau {
            return Err(parse_err(path, format!("interval column out of order at row {tau}")));
        }
        for f in &row[1..] {
            data.push(parse_f64(path, f)?);
        }
    }
    Ok((rows.len(), n_sec, data))
}

pub fn save_counts(path: &Path, counts: &TrafficCounts) -> Result<()> {
    fs::write(
        path,
        write_counts_table(counts.observation_intervals(), counts.n_sec(), counts.flat()),
    )?;
    Ok(())
}

pub fn load_counts(path: &Path) -> Result<TrafficCounts> {
    let text = read(path, "produce counts with the simulate command")?;
    let (rows, n_sec, data) = read_counts_table(path, &text)?;
    TrafficCounts::from_flat(rows, n_sec, data)
}

// ---------------------------------------------------------------------------
// distributions

const DISTRIBUTION_HEADER: &str = "interval,node,value";

pub fn save_distribution(path: &Path, dist: &GlobalDistribution, n_od: usize) -> Result<()> {
    if n_od == 0 || !dist.len().is_multiple_of(n_od) {
        return Err(Error::ShapeMismatch(format!(
            "distribution of length {} does not factor into {n_od} nodes",
            dist.len()
        )));
    }
    let mut out = String::from(DISTRIBUTION_HEADER);
    out.push('\n');
    for (c, v) in dist.values().iter().enumerate() {
        writeln!(out, "{},{},{v}", c / n_od, c % n_od).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_distribution(
    path: &Path,
    kind: FlowKind,
    source: DistributionSource,
) -> Result<GlobalDistribution> {
    let text = read(path, "produce distributions with infer or report")?;
    let rows = csv_rows(path, &text, DISTRIBUTION_HEADER)?;
    if rows.is_empty() {
        return Err(parse_err(path, "no distribution rows"));
    }
    let n_od = rows
        .iter()
        .map(|r| r.get(1).map(|f| f.trim().parse::<usize>().unwrap_or(0)).unwrap_or(0))
        .max()
        .unwrap()
        + 1;
    let mut values = vec![0.0; rows.len()];
    for row in &rows {
        if row.len() != 3 {
            return Err(parse_err(path, "distribution rows need 3 fields"));
        }
        let t = parse_usize(path, &row[0])?;
        let node = parse_usize(path, &row[1])?;
        let idx = t * n_od + node;
        if idx >= values.len() {
            return Err(parse_err(path, format!("cell ({t},{node}) out of range")));
        }
        values[idx] = parse_f64(path, &row[2])?;
    }
    GlobalDistribution::new(kind, source, values)
}

// ---------------------------------------------------------------------------
// trip logs

pub fn save_trip_log(path: &Path, log: &TripLog) -> Result<()> {
    let mut out = String::new();
    let meta = serde_json::json!({
        "estimation_intervals": log.estimation_intervals,
        "observation_intervals": log.observation_intervals,
        "n_od": log.n_od,
        "n_sec": log.n_sec,
    });
    writeln!(out, "{meta}").unwrap();
    for record in &log.records {
        writeln!(out, "{}", serde_json::to_string(record)?).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_trip_log(path: &Path) -> Result<TripLog> {
    let text = read(path, "produce one with the simulate command")?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let meta_line = lines.next().ok_or_else(|| parse_err(path, "empty trip log"))?;
    let meta: serde_json::Value = serde_json::from_str(meta_line)?;
    let field = |name: &str| -> Result<usize> {
        meta.get(name)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| parse_err(path, format!("missing metadata field {name}")))
    };
    let mut log = TripLog {
        estimation_intervals: field("estimation_intervals")?,
        observation_intervals: field("observation_intervals")?,
        n_od: field("n_od")?,
        n_sec: field("n_sec")?,
        records: Vec::new(),
    };
    for line in lines {
        log.records.push(serde_json::from_str(line)?);
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// datasets

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    m: u32,
    network_fingerprint: String,
    n_samples: usize,
    observation_intervals: usize,
    n_sec: usize,
    intervals: usize,
    n_od: usize,
}

const SAMPLE_DIST_HEADER: &str = "interval,node,production,attraction";

fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("sample_{index:04}_counts.csv")),
        dir.join(format!("sample_{index:04}_dist.csv")),
    )
}

/// `intervals` is the estimation-interval count the samples were built on;
/// it cannot be recovered from the distribution lengths alone.
pub fn save_dataset(dir: &Path, dataset: &Dataset, intervals: usize) -> Result<()> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::InvalidConfig("refusing to save an empty dataset".into()))?;
    if intervals == 0 || first.production.len() % intervals != 0 {
        return Err(Error::ShapeMismatch(format!(
            "distributions of length {} do not factor into {intervals} intervals",
            first.production.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let n_od = first.production.len() / intervals;
    let manifest = DatasetManifest {
        seed: dataset.seed,
        m: dataset.m,
        network_fingerprint: dataset.network_fingerprint.clone(),
        n_samples: dataset.samples.len(),
        observation_intervals: first.counts.observation_intervals,
        n_sec: first.counts.n_sec,
        intervals,
        n_od,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    for (index, sample) in dataset.samples.iter().enumerate() {
        let (counts_path, dist_path) = sample_paths(dir, index);
        fs::write(
            &counts_path,
            write_counts_table(
                sample.counts.observation_intervals,
                sample.counts.n_sec,
                &sample.counts.data,
            ),
        )?;
        let mut out = String::from(SAMPLE_DIST_HEADER);
        out.push('\n');
        for c in 0..sample.production.len() {
            writeln!(
                out,
                "{},{},{},{}",
                c / n_od,
                c % n_od,
                sample.production.values()[c],
                sample.attraction.values()[c]
            )
            .unwrap();
        }
        fs::write(&dist_path, out)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = read(&manifest_path, "produce a dataset with the sample command")?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for index in 0..manifest.n_samples {
        let (counts_path, dist_path) = sample_paths(dir, index);
        let counts_text = read(&counts_path, "dataset directory is incomplete")?;
        let (rows, n_sec, data) = read_counts_table(&counts_path, &counts_text)?;
        if rows != manifest.observation_intervals || n_sec != manifest.n_sec {
            return Err(parse_err(
                &counts_path,
                format!("sample shape {rows}x{n_sec} does not match the manifest"),
            ));
        }
        let dist_text = read(&dist_path, "dataset directory is incomplete")?;
        let dist_rows = csv_rows(&dist_path, &dist_text, SAMPLE_DIST_HEADER)?;
        let want = manifest.intervals * manifest.n_od;
        if dist_rows.len() != want {
            return Err(parse_err(
                &dist_path,
                format!("expected {want} distribution rows, got {}", dist_rows.len()),
            ));
        }
        let mut production = vec![0.0; want];
        let mut attraction = vec![0.0; want];
        for row in &dist_rows {
            if row.len() != 4 {
                return Err(parse_err(&dist_path, "distribution rows need 4 fields"));
            }
            let t = parse_usize(&dist_path, &row[0])?;
            let node = parse_usize(&dist_path, &row[1])?;
            let idx = t * manifest.n_od + node;
            if idx >= want {
                return Err(parse_err(&dist_path, format!("cell ({t},{node}) out of range")));
            }
            production[idx] = parse_f64(&dist_path, &row[2])?;
            attraction[idx] = parse_f64(&dist_path, &row[3])?;
        }
        samples.push(Sample {
            counts: CountsDistribution {
                observation_intervals: rows,
                n_sec,
                data,
            },
            production: GlobalDistribution::new(
                FlowKind::Production,
                DistributionSource::True,
                production,
            )?,
            attraction: GlobalDistribution::new(
                FlowKind::Attraction,
                DistributionSource::True,
                attraction,
            )?,
        });
    }
    Ok(Dataset {
        seed: manifest.seed,
        m: manifest.m,
        network_fingerprint: manifest.network_fingerprint,
        samples,
    })
}

// ---------------------------------------------------------------------------
// learner checkpoints and curves

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    params: LearnerParams,
}

pub fn save_checkpoint(path: &Path, params: &LearnerParams) -> Result<()> {
    let checkpoint = Checkpoint { version: CHECKPOINT_VERSION, params: params.clone() };
    fs::write(path, serde_json::to_string(&checkpoint)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LearnerParams> {
    let text = read(path, "produce one with the train command")?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(parse_err(
            path,
            format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                checkpoint.version
            ),
        ));
    }
    checkpoint.params.dims.validate()?;
    Ok(checkpoint.params)
}

const CURVE_HEADER: &str = "epoch,train_loss,validation_loss";

pub fn save_training_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for row in curve {
        writeln!(out, "{},{},{}", row.epoch, row.train_loss, row.validation_loss).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_training_curve(path: &Path) -> Result<Vec<EpochStats>> {
    let text = read(path, "produce one with the train command")?;
    let rows = csv_rows(path, &text, CURVE_HEADER)?;
    rows.iter()
        .map(|row| {
            if row.len() != 3 {
                return Err(parse_err(path, "curve rows need 3 fields"));
            }
            Ok(EpochStats {
                epoch: parse_usize(path, &row[0])?,
                train_loss: parse_f64(path, &row[1])?,
                validation_loss: parse_f64(path, &row[2])?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// estimator traces and metric summaries

pub fn save_trace(path: &Path, trace: &[OuterRecord]) -> Result<()> {
    let intervals = trace.first().map(|r| r.rmsn.len()).unwrap_or(0);
    let mut out = String::from("iteration,objective,numeric,structure,alpha");
    for t in 0..intervals {
        write!(out, ",rmsn_{t}").unwrap();
    }
    for t in 0..intervals {
        write!(out, ",rho_{t}").unwrap();
    }
    out.push('\n');
    for row in trace {
        write!(
            out,
            "{},{},{},{},{}",
            row.outer, row.objective, row.numeric, row.structure, row.alpha
        )
        .unwrap();
        for v in &row.rmsn {
            write!(out, ",{v}").unwrap();
        }
        for v in &row.correlation {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

const SUMMARY_HEADER: &str = "interval,rmsn,rho";

pub fn save_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for (t, row) in summary.per_interval.iter().enumerate() {
        writeln!(out, "{t},{},{}", row.rmsn, row.correlation).unwrap();
    }
    writeln!(out, "average,{},{}", summary.average.rmsn, summary.average.correlation).unwrap();
    fs::write(path, out)?;
    Ok(())
}

/// Aligned text rendering of a metric summary.
pub fn format_summary(summary: &Summary) -> String {
    let mut out = format!("{:<10}{:>12}{:>12}\n", "interval", "rmsn", "rho");
    for (t, row) in summary.per_interval.iter().enumerate() {
        writeln!(out, "{t:<10}{:>12.4}{:>12.4}", row.rmsn, row.correlation).unwrap();
    }
    writeln!(out, "{:<10}{:>12.4}{:>12.4}", "average", summary.average.rmsn, summary.average.correlation)
        .unwrap();
    out
}
