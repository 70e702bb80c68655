//! Evaluation metrics: normalized root mean square error, Pearson
//! correlation, KL divergence and Jensen-Shannon divergence.

use crate::error::{Error, Result};
use crate::model::OdSequence;

const EPS: f64 = 1e-12;

/// Normalized RMSE of an estimated sequence against the truth:
/// `sqrt(n * sum((x - y)^2)) / sum(x)` with `n` the number of cells.
pub fn rmsn(truth: &OdSequence, estimate: &OdSequence) -> Result<f64> {
    if truth.intervals() != estimate.intervals() || truth.n_od() != estimate.n_od() {
        return Err(Error::ShapeMismatch(format!(
            "rmsn needs equal shapes, got ({},{}) vs ({},{})",
            truth.intervals(),
            truth.n_od(),
            estimate.intervals(),
            estimate.n_od()
        )));
    }
    let total: f64 = truth.total();
    if total <= 0.0 {
        return Err(Error::DegenerateFlows);
    }
    let n = truth.flat().len() as f64;
    let sq: f64 = truth
        .flat()
        .iter()
        .zip(estimate.flat())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((n * sq).sqrt() / total)
}

/// Pearson correlation between two equally long slices.
///
/// Errors when either slice has zero variance (correlation undefined).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "pearson needs equal non-empty slices, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation between two OD sequences over all cells.
pub fn sequence_correlation(truth: &OdSequence, estimate: &OdSequence) -> Result<f64> {
    if truth.intervals() != estimate.intervals() || truth.n_od() != estimate.n_od() {
        return Err(Error::ShapeMismatch("correlation needs equal shapes".into()));
    }
    pearson(truth.flat(), estimate.flat())
}

/// Smoothed KL divergence `sum p ln((p + eps) / (q + eps))` with `eps =
/// 1e-12`; safe on zero cells, and exactly zero when `p == q`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "kl needs equal non-empty slices, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        acc += a * ((a + EPS) / (b + EPS)).ln();
    }
    Ok(acc)
}

/// Jensen-Shannon divergence `0.5 KL(p || m) + 0.5 KL(q || m)` with `m` the
/// midpoint. Values are floored at `eps` inside the logarithms only, so
/// distributions with disjoint support score exactly `ln 2`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "jsd needs equal non-empty slices, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            acc += 0.5 * a * (a.max(EPS) / m.max(EPS)).ln();
        }
        if *b > 0.0 {
            acc += 0.5 * b * (b.max(EPS) / m.max(EPS)).ln();
        }
    }
    Ok(acc)
}

/// Normalized RMSE between two flat slices (one estimation interval's cells).
pub fn rmsn_slice(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "rmsn needs equal non-empty slices, got {} and {}",
            truth.len(),
            estimate.len()
        )));
    }
    let total: f64 = truth.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateFlows);
    }
    let n = truth.len() as f64;
    let sq: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((n * sq).sqrt() / total)
}

/// Scores of one estimate against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceScores {
    pub rmsn: f64,
    pub correlation: f64,
}

/// RMSN and correlation of an estimated sequence in one call.
pub fn score_sequence(truth: &OdSequence, estimate: &OdSequence) -> Result<SequenceScores> {
    Ok(SequenceScores {
        rmsn: rmsn(truth, estimate)?,
        correlation: sequence_correlation(truth, estimate)?,
    })
}

/// Per-interval scores plus their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub per_interval: Vec<SequenceScores>,
    pub average: SequenceScores,
}

/// Score every estimation interval separately and average the columns.
pub fn summary(truth: &OdSequence, estimate: &OdSequence) -> Result<Summary> {
    if truth.intervals() != estimate.intervals() || truth.n_od() != estimate.n_od() {
        return Err(Error::ShapeMismatch("summary needs equal shapes".into()));
    }
    let mut per_interval = Vec::with_capacity(truth.intervals());
    for t in 0..truth.intervals() {
        let ts = truth.interval_slice(t);
        let es = estimate.interval_slice(t);
        per_interval.push(SequenceScores {
            rmsn: rmsn_slice(ts, es)?,
            correlation: pearson(ts, es)?,
        });
    }
    let n = per_interval.len() as f64;
    let average = SequenceScores {
        rmsn: per_interval.iter().map(|s| s.rmsn).sum::<f64>() / n,
        correlation: per_interval.iter().map(|s| s.correlation).sum::<f64>() / n,
    };
    Ok(Summary { per_interval, average })
}
