//! Core domain model: the aggregated network, OD-sequence and counts tensors,
//! and the normalization / flow formulas everything else is built on.
//!
//! Conventions used throughout the crate:
//!
//! * An OD sequence is a tensor of shape `(I, n_od, n_od)`; its flattened view
//!   is interval-major, then origin, then destination, so cell `(t, i, j)`
//!   lives at `t * n_od^2 + i * n_od + j`.
//! * Traffic counts are a tensor of shape `(o, n_sec)`; row `tau` holds the
//!   per-section vehicle entries during observation interval `tau`.
//! * Global production/attraction vectors have length `I * n_od` and are
//!   interval-major: entry `t * n_od + i` belongs to node `i` in interval `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An OD node: a cluster of intersections collapsed to a single centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdNode {
    pub id: usize,
    /// Planar x coordinate in meters.
    pub x: f64,
    /// Planar y coordinate in meters.
    pub y: f64,
}

/// A directed aggregated road section between two OD nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub id: usize,
    pub from_node: usize,
    pub to_node: usize,
    /// Mean length of the aggregated raw roads, meters.
    pub length: f64,
    /// Mean free-flow speed, m/s.
    pub free_flow_speed: f64,
    /// Capacity in vehicles per observation interval.
    pub capacity: f64,
}

/// Aggregated study network: OD nodes plus directed sections.
///
/// At most one directed section exists per ordered node pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub od_nodes: Vec<OdNode>,
    pub sections: Vec<Section>,
}

impl Network {
    /// Validates invariants and returns the network.
    pub fn new(od_nodes: Vec<OdNode>, sections: Vec<Section>) -> Result<Self> {
        let net = Network { od_nodes, sections };
        net.validate()?;
        Ok(net)
    }

    pub fn n_od(&self) -> usize {
        self.od_nodes.len()
    }

    pub fn n_sec(&self) -> usize {
        self.sections.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.od_nodes.len();
        if n == 0 {
            return Err(Error::InvalidNetwork("network has no OD nodes".into()));
        }
        for (k, node) in self.od_nodes.iter().enumerate() {
            if node.id != k {
                return Err(Error::InvalidNetwork(format!(
                    "od node ids must be dense 0..n_od, found {} at position {}",
                    node.id, k
                )));
            }
            if !node.x.is_finite() || !node.y.is_finite() {
                return Err(Error::InvalidNetwork(format!(
                    "od node {} has non-finite coordinates",
                    node.id
                )));
            }
        }
        let mut seen_pairs = std::collections::BTreeSet::new();
        for (k, sec) in self.sections.iter().enumerate() {
            if sec.id != k {
                return Err(Error::InvalidNetwork(format!(
                    "section ids must be dense 0..n_sec, found {} at position {}",
                    sec.id, k
                )));
            }
            if sec.from_node == sec.to_node {
                return Err(Error::InvalidNetwork(format!(
                    "section {} connects node {} to itself",
                    sec.id, sec.from_node
                )));
            }
            if sec.from_node >= n || sec.to_node >= n {
                return Err(Error::InvalidNetwork(format!(
                    "section {} references unknown node",
                    sec.id
                )));
            }
            if !seen_pairs.insert((sec.from_node, sec.to_node)) {
                return Err(Error::InvalidNetwork(format!(
                    "duplicate directed section {} -> {}",
                    sec.from_node, sec.to_node
                )));
            }
            let finite_positive =
                |v: f64| v.is_finite() && v > 0.0;
            if !finite_positive(sec.length)
                || !finite_positive(sec.free_flow_speed)
                || !finite_positive(sec.capacity)
            {
                return Err(Error::InvalidNetwork(format!(
                    "section {} must have positive length, speed and capacity",
                    sec.id
                )));
            }
        }
        Ok(())
    }

    /// Directed section from `i` to `j`, if one exists.
    pub fn section_between(&self, i: usize, j: usize) -> Option<&Section> {
        self.sections.iter().find(|s| s.from_node == i && s.to_node == j)
    }
}

/// Signed node-section incidence matrix, shape `(n_od, n_sec)`.
///
/// Entry `(i, e)` is `+1` if section `e` enters node `i`, `-1` if it exits
/// node `i`, and `0` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeIncidence {
    n_od: usize,
    n_sec: usize,
    entries: Vec<i8>,
}

impl NodeIncidence {
    pub fn n_od(&self) -> usize {
        self.n_od
    }

    pub fn n_sec(&self) -> usize {
        self.n_sec
    }

    pub fn get(&self, node: usize, section: usize) -> i8 {
        self.entries[node * self.n_sec + section]
    }

    /// Row of one node over all sections.
    pub fn row(&self, node: usize) -> &[i8] {
        &self.entries[node * self.n_sec..(node + 1) * self.n_sec]
    }
}

/// Builds the signed incidence matrix of a network.
pub fn build_incidence(network: &Network) -> NodeIncidence {
    let n_od = network.n_od();
    let n_sec = network.n_sec();
    let mut entries = vec![0i8; n_od * n_sec];
    for sec in &network.sections {
        entries[sec.to_node * n_sec + sec.id] = 1;
        entries[sec.from_node * n_sec + sec.id] = -1;
    }
    NodeIncidence { n_od, n_sec, entries }
}

/// Time discretization: `I` estimation intervals subdivided into `o`
/// observation intervals, `k = o / I` observations per estimation interval.
/// `window_len` (delta) is the number of extra observation slices fed to the
/// learner beyond the first slice of each estimation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub estimation_intervals: usize,
    pub observation_intervals: usize,
    pub window_len: usize,
    /// Duration of one observation interval in seconds; an estimation
    /// interval lasts `k()` times this long.
    pub interval_seconds: f64,
}

impl TimeGrid {
    pub fn new(
        estimation_intervals: usize,
        observation_intervals: usize,
        window_len: usize,
        interval_seconds: f64,
    ) -> Result<Self> {
        if estimation_intervals == 0 || observation_intervals == 0 {
            return Err(Error::InvalidTimeGrid("interval counts must be positive".into()));
        }
        if !observation_intervals.is_multiple_of(estimation_intervals) {
            return Err(Error::InvalidTimeGrid(format!(
                "observation intervals ({observation_intervals}) must be a multiple of estimation intervals ({estimation_intervals})"
            )));
        }
        if window_len == 0 {
            return Err(Error::InvalidTimeGrid("window length must be >= 1".into()));
        }
        if !interval_seconds.is_finite() || interval_seconds <= 0.0 {
            return Err(Error::InvalidTimeGrid("interval duration must be positive".into()));
        }
        Ok(TimeGrid {
            estimation_intervals,
            observation_intervals,
            window_len,
            interval_seconds,
        })
    }

    /// Observation intervals per estimation interval.
    pub fn k(&self) -> usize {
        self.observation_intervals / self.estimation_intervals
    }
}

/// Trips per OD pair per estimation interval, shape `(I, n_od, n_od)`.
///
/// Entries are non-negative reals; the diagonal (intra-node demand) is
/// identically zero because trips inside one cluster never traverse an
/// aggregated section.
#[derive(Debug, Clone, PartialEq)]
pub struct OdSequence {
    intervals: usize,
    n_od: usize,
    data: Vec<f64>,
}

impl OdSequence {
    pub fn zeros(intervals: usize, n_od: usize) -> Self {
        OdSequence { intervals, n_od, data: vec![0.0; intervals * n_od * n_od] }
    }

    pub fn from_flat(intervals: usize, n_od: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != intervals * n_od * n_od {
            return Err(Error::InvalidDemand(format!(
                "expected {} cells, got {}",
                intervals * n_od * n_od,
                data.len()
            )));
        }
        let seq = OdSequence { intervals, n_od, data };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        for t in 0..self.intervals {
            for i in 0..self.n_od {
                for j in 0..self.n_od {
                    let v = self.get(t, i, j);
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::InvalidDemand(format!(
                            "cell ({t},{i},{j}) = {v} is not a non-negative finite value"
                        )));
                    }
                    if i == j && v != 0.0 {
                        return Err(Error::InvalidDemand(format!(
                            "diagonal cell ({t},{i},{i}) must be zero, got {v}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn n_od(&self) -> usize {
        self.n_od
    }

    pub fn n_cells(&self) -> usize {
        self.n_od * self.n_od
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i * self.n_od + j
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize, j: usize) -> f64 {
        self.data[(t * self.n_od + i) * self.n_od + j]
    }

    #[inline]
    pub fn set(&mut self, t: usize, i: usize, j: usize, v: f64) {
        debug_assert!(i != j || v == 0.0, "diagonal demand must stay zero");
        self.data[(t * self.n_od + i) * self.n_od + j] = v;
    }

    /// Interval-major flattened view of length `I * n_od^2`.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    /// One interval as a flat slice of `n_od^2` cells.
    pub fn interval_slice(&self, t: usize) -> &[f64] {
        let n2 = self.n_od * self.n_od;
        &self.data[t * n2..(t + 1) * n2]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Per-section vehicle entries per observation interval, shape `(o, n_sec)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficCounts {
    observation_intervals: usize,
    n_sec: usize,
    data: Vec<f64>,
}

impl TrafficCounts {
    pub fn zeros(observation_intervals: usize, n_sec: usize) -> Self {
        TrafficCounts { observation_intervals, n_sec, data: vec![0.0; observation_intervals * n_sec] }
    }

    pub fn from_flat(observation_intervals: usize, n_sec: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != observation_intervals * n_sec {
            return Err(Error::ShapeMismatch(format!(
                "counts need {} entries, got {}",
                observation_intervals * n_sec,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::ShapeMismatch(format!("counts must be non-negative, got {v}")));
        }
        Ok(TrafficCounts { observation_intervals, n_sec, data })
    }

    pub fn observation_intervals(&self) -> usize {
        self.observation_intervals
    }

    pub fn n_sec(&self) -> usize {
        self.n_sec
    }

    #[inline]
    pub fn get(&self, tau: usize, section: usize) -> f64 {
        self.data[tau * self.n_sec + section]
    }

    #[inline]
    pub fn add(&mut self, tau: usize, section: usize, flow: f64) {
        self.data[tau * self.n_sec + section] += flow;
    }

    /// Counts of observation interval `tau` over all sections.
    pub fn row(&self, tau: usize) -> &[f64] {
        &self.data[tau * self.n_sec..(tau + 1) * self.n_sec]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sums the `k` observation rows of each estimation interval, producing a
    /// counts tensor with one row per estimation interval.
    pub fn aggregate_to_estimation_intervals(&self, k: usize) -> TrafficCounts {
        assert!(k >= 1 && self.observation_intervals.is_multiple_of(k));
        let rows = self.observation_intervals / k;
        let mut data = vec![0.0; rows * self.n_sec];
        for tau in 0..self.observation_intervals {
            let r = tau / k;
            for e in 0..self.n_sec {
                data[r * self.n_sec + e] += self.get(tau, e);
            }
        }
        TrafficCounts { observation_intervals: rows, n_sec: self.n_sec, data }
    }
}

/// Normalized traffic counts: every cell of `E` divided by the grand total.
#[derive(Debug, Clone, PartialEq)]
pub struct CountsDistribution {
    pub observation_intervals: usize,
    pub n_sec: usize,
    pub data: Vec<f64>,
}

impl CountsDistribution {
    #[inline]
    pub fn get(&self, tau: usize, section: usize) -> f64 {
        self.data[tau * self.n_sec + section]
    }

    pub fn row(&self, tau: usize) -> &[f64] {
        &self.data[tau * self.n_sec..(tau + 1) * self.n_sec]
    }
}

/// Normalizes a counts tensor into a distribution over all `(tau, section)`
/// cells. Errors with an empty-observation message when the tensor is all
/// zero.
pub fn normalize_counts(counts: &TrafficCounts) -> Result<CountsDistribution> {
    let total = counts.total();
    if total <= 0.0 {
        return Err(Error::EmptyObservation);
    }
    Ok(CountsDistribution {
        observation_intervals: counts.observation_intervals(),
        n_sec: counts.n_sec(),
        data: counts.flat().iter().map(|v| v / total).collect(),
    })
}

/// Whether a global distribution describes production or attraction flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Production,
    Attraction,
}

/// Where a global distribution came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionSource {
    /// Normalized from a ground-truth sequence.
    True,
    /// Inferred by the distribution learner.
    Inferred,
    /// Normalized from an optimizer iterate.
    Optimized,
}

/// A normalized flow vector over `(interval, node)` cells; sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDistribution {
    pub kind: FlowKind,
    pub source: DistributionSource,
    values: Vec<f64>,
}

impl GlobalDistribution {
    pub fn new(kind: FlowKind, source: DistributionSource, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDistribution(
                "entries must be non-negative finite values".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}, not 1")));
        }
        Ok(GlobalDistribution { kind, source, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Uniform distribution over `n` cells.
    pub fn uniform(kind: FlowKind, n: usize) -> Self {
        GlobalDistribution {
            kind,
            source: DistributionSource::True,
            values: vec![1.0 / n as f64; n],
        }
    }
}

/// Global production and attraction flows of a sequence.
///
/// `p[t * n_od + i]` is the number of trips leaving node `i` during interval
/// `t` (row sums); `a[t * n_od + j]` counts arrivals (column sums).
pub fn production_attraction(seq: &OdSequence) -> (Vec<f64>, Vec<f64>) {
    let n = seq.n_od();
    let mut p = vec![0.0; seq.intervals() * n];
    let mut a = vec![0.0; seq.intervals() * n];
    for t in 0..seq.intervals() {
        for i in 0..n {
            for j in 0..n {
                let v = seq.get(t, i, j);
                p[t * n + i] += v;
                a[t * n + j] += v;
            }
        }
    }
    (p, a)
}

/// Normalizes a flow vector to a global distribution.
pub fn to_distribution(flows: &[f64], kind: FlowKind, source: DistributionSource) -> Result<GlobalDistribution> {
    if flows.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution("flows must be non-negative".into()));
    }
    let total: f64 = flows.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateFlows);
    }
    GlobalDistribution::new(kind, source, flows.iter().map(|v| v / total).collect())
}

/// Convenience: true production and attraction distributions of a sequence.
pub fn true_distributions(seq: &OdSequence) -> Result<(GlobalDistribution, GlobalDistribution)> {
    let (p, a) = production_attraction(seq);
    let dp = to_distribution(&p, FlowKind::Production, DistributionSource::True)?;
    let da = to_distribution(&a, FlowKind::Attraction, DistributionSource::True)?;
    Ok((dp, da))
}
