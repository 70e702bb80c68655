//! Deterministic mesoscopic traffic loading.
//!
//! Demand is split into flow packets that depart at the midpoints of the
//! observation sub-intervals of their estimation interval, follow the
//! shortest path under congestion-dependent travel times, and register an
//! entry count on every section they enter. The same entry events are
//! back-calculated into the assignment tensor that links demand to counts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, OdSequence, TimeGrid, TrafficCounts};

/// BPR delay coefficients: tt = tt0 * (1 + ALPHA * (x / c)^BETA).
const BPR_ALPHA: f64 = 0.15;
const BPR_BETA: i32 = 4;

/// One section entry of a flow packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub section: usize,
    /// Observation interval of the entry; may exceed the study horizon when
    /// the packet is still en route at the end.
    pub interval: usize,
    /// Entry time in seconds from study start.
    pub time: f64,
}

/// The full traversal record of one flow packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub origin: usize,
    pub destination: usize,
    /// Estimation interval the packet's demand belongs to.
    pub departure_interval: usize,
    pub flow: f64,
    pub departure_time: f64,
    pub entries: Vec<SectionEntry>,
}

/// Every packet traversal of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripLog {
    pub estimation_intervals: usize,
    pub observation_intervals: usize,
    pub n_od: usize,
    pub n_sec: usize,
    pub records: Vec<PacketRecord>,
}

/// Fraction of each pair-interval demand entering each section during each
/// observation interval; shape `(o, I, n_sec, n_od^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentTensor {
    observation_intervals: usize,
    estimation_intervals: usize,
    n_sec: usize,
    n_cells: usize,
    data: Vec<f64>,
}

impl AssignmentTensor {
    pub fn observation_intervals(&self) -> usize {
        self.observation_intervals
    }

    pub fn estimation_intervals(&self) -> usize {
        self.estimation_intervals
    }

    pub fn n_sec(&self) -> usize {
        self.n_sec
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    #[inline]
    fn idx(&self, tau: usize, t: usize, e: usize, ij: usize) -> usize {
        ((tau * self.estimation_intervals + t) * self.n_sec + e) * self.n_cells + ij
    }

    #[inline]
    pub fn get(&self, tau: usize, t: usize, e: usize, ij: usize) -> f64 {
        self.data[self.idx(tau, t, e, ij)]
    }

    /// Build a tensor directly from flat data laid out as
    /// `[tau][t][e][ij]`, for synthetic scenarios and tests.
    pub fn from_flat(
        observation_intervals: usize,
        estimation_intervals: usize,
        n_sec: usize,
        n_cells: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expect = observation_intervals * estimation_intervals * n_sec * n_cells;
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "assignment tensor wants {expect} entries, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::ShapeMismatch(
                "assignment tensor entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { observation_intervals, estimation_intervals, n_sec, n_cells, data })
    }

    /// Predicted counts of a flattened demand vector: eps[tau][e] =
    /// sum_t sum_ij P[tau, t, e, ij] * demand[t * n_cells + ij].
    pub fn predict_counts_flat(&self, demand: &[f64]) -> Vec<f64> {
        assert_eq!(demand.len(), self.estimation_intervals * self.n_cells);
        let mut out = vec![0.0; self.observation_intervals * self.n_sec];
        for tau in 0..self.observation_intervals {
            for t in 0..self.estimation_intervals {
                let dem = &demand[t * self.n_cells..(t + 1) * self.n_cells];
                for e in 0..self.n_sec {
                    let base = self.idx(tau, t, e, 0);
                    let row = &self.data[base..base + self.n_cells];
                    let mut acc = 0.0;
                    for (p, d) in row.iter().zip(dem) {
                        acc += p * d;
                    }
                    out[tau * self.n_sec + e] += acc;
                }
            }
        }
        out
    }

    /// Predicted counts of an OD sequence.
    pub fn predict_counts(&self, seq: &OdSequence) -> TrafficCounts {
        let flat = self.predict_counts_flat(seq.flat());
        TrafficCounts::from_flat(self.observation_intervals, self.n_sec, flat)
            .expect("predicted counts are non-negative")
    }

    /// Adjoint product: out[t * n_cells + ij] = sum_tau sum_e
    /// P[tau, t, e, ij] * r[tau * n_sec + e].
    pub fn transpose_apply(&self, residual: &[f64]) -> Vec<f64> {
        assert_eq!(residual.len(), self.observation_intervals * self.n_sec);
        let mut out = vec![0.0; self.estimation_intervals * self.n_cells];
        for tau in 0..self.observation_intervals {
            for t in 0..self.estimation_intervals {
                let dst = &mut out[t * self.n_cells..(t + 1) * self.n_cells];
                for e in 0..self.n_sec {
                    let r = residual[tau * self.n_sec + e];
                    if r == 0.0 {
                        continue;
                    }
                    let base = self.idx(tau, t, e, 0);
                    let row = &self.data[base..base + self.n_cells];
                    for (d, p) in dst.iter_mut().zip(row) {
                        *d += p * r;
                    }
                }
            }
        }
        out
    }

    /// Sums groups of `k` observation rows, yielding a tensor whose
    /// observation axis matches the estimation intervals.
    pub fn aggregate_observations(&self, k: usize) -> AssignmentTensor {
        assert!(k >= 1 && self.observation_intervals.is_multiple_of(k));
        let rows = self.observation_intervals / k;
        let mut agg = AssignmentTensor {
            observation_intervals: rows,
            estimation_intervals: self.estimation_intervals,
            n_sec: self.n_sec,
            n_cells: self.n_cells,
            data: vec![0.0; rows * self.estimation_intervals * self.n_sec * self.n_cells],
        };
        for tau in 0..self.observation_intervals {
            let r = tau / k;
            for t in 0..self.estimation_intervals {
                for e in 0..self.n_sec {
                    let src = self.idx(tau, t, e, 0);
                    let dst = agg.idx(r, t, e, 0);
                    for ij in 0..self.n_cells {
                        agg.data[dst + ij] += self.data[src + ij];
                    }
                }
            }
        }
        agg
    }
}

/// Chronological event: packet `packet` enters leg `leg` of its path at
/// `time`. Ordering is total (time, packet, leg) so the run is deterministic.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    packet: usize,
    leg: usize,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.packet.cmp(&other.packet))
            .then(self.leg.cmp(&other.leg))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct PacketState {
    origin: usize,
    destination: usize,
    flow: f64,
    path: Vec<usize>,
}

/// Dijkstra tree from one origin under a fixed travel-time table; equal-cost
/// ties keep the smallest incoming section id.
fn shortest_tree(
    network: &Network,
    out_sections: &[Vec<usize>],
    tt: &[f64],
    origin: usize,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = network.n_od();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut heap: BinaryHeap<std::cmp::Reverse<(u64, usize)>> = BinaryHeap::new();
    dist[origin] = 0.0;
    heap.push(std::cmp::Reverse((0.0f64.to_bits(), origin)));
    let mut done = vec![false; n];
    while let Some(std::cmp::Reverse((dbits, u))) = heap.pop() {
        if done[u] || f64::from_bits(dbits) > dist[u] {
            continue;
        }
        done[u] = true;
        for &sid in &out_sections[u] {
            let sec = &network.sections[sid];
            let v = sec.to_node;
            let nd = dist[u] + tt[sid];
            if nd < dist[v] {
                dist[v] = nd;
                parent[v] = Some(sid);
                heap.push(std::cmp::Reverse((nd.to_bits(), v)));
            } else if nd == dist[v] {
                if let Some(cur) = parent[v] {
                    if sid < cur {
                        parent[v] = Some(sid);
                    }
                }
            }
        }
    }
    (dist, parent)
}

fn extract_path(
    network: &Network,
    parent: &[Option<usize>],
    dist: &[f64],
    origin: usize,
    destination: usize,
) -> Result<Vec<usize>> {
    if !dist[destination].is_finite() {
        return Err(Error::NoPath { from: origin, to: destination });
    }
    let mut path = Vec::new();
    let mut node = destination;
    while node != origin {
        let sid = parent[node].expect("finite distance implies a parent section");
        path.push(sid);
        node = network.sections[sid].from_node;
    }
    path.reverse();
    Ok(path)
}

/// Runs the mesoscopic loading of `seq` on `network` and returns the section
/// entry counts over the study horizon together with the full trip log.
pub fn simulate(network: &Network, seq: &OdSequence, grid: &TimeGrid) -> Result<(TrafficCounts, TripLog)> {
    seq.validate()?;
    if seq.n_od() != network.n_od() {
        return Err(Error::ShapeMismatch(format!(
            "sequence has {} od nodes, network has {}",
            seq.n_od(),
            network.n_od()
        )));
    }
    if seq.intervals() != grid.estimation_intervals {
        return Err(Error::ShapeMismatch(format!(
            "sequence has {} intervals, grid has {}",
            seq.intervals(),
            grid.estimation_intervals
        )));
    }
    let n_od = network.n_od();
    let n_sec = network.n_sec();
    let o = grid.observation_intervals;
    let k = grid.k();
    let delta = grid.interval_seconds;

    let mut out_sections: Vec<Vec<usize>> = vec![Vec::new(); n_od];
    for sec in &network.sections {
        out_sections[sec.from_node].push(sec.id);
    }
    for outs in &mut out_sections {
        outs.sort_unstable();
    }
    let tt0: Vec<f64> = network.sections.iter().map(|s| s.length / s.free_flow_speed).collect();

    // Spawn packets in deterministic order: interval, origin, destination,
    // sub-interval.
    let mut packets: Vec<PacketState> = Vec::new();
    let mut records: Vec<PacketRecord> = Vec::new();
    let mut heap: BinaryHeap<std::cmp::Reverse<Event>> = BinaryHeap::new();
    for t in 0..seq.intervals() {
        for i in 0..n_od {
            for j in 0..n_od {
                let m = seq.get(t, i, j);
                if m <= 0.0 {
                    continue;
                }
                let flow = m / k as f64;
                for s in 0..k {
                    let dep = ((t * k + s) as f64 + 0.5) * delta;
                    let id = packets.len();
                    packets.push(PacketState {
                        origin: i,
                        destination: j,
                        flow,
                        path: Vec::new(),
                    });
                    records.push(PacketRecord {
                        origin: i,
                        destination: j,
                        departure_interval: t,
                        flow,
                        departure_time: dep,
                        entries: Vec::new(),
                    });
                    heap.push(std::cmp::Reverse(Event { time: dep, packet: id, leg: 0 }));
                }
            }
        }
    }

    let mut counts = TrafficCounts::zeros(o, n_sec);
    // Per-interval entry totals (also beyond the horizon) feeding congestion.
    let mut entry_acc: Vec<Vec<f64>> = Vec::new();
    // Travel-time tables built lazily; table tau is frozen at the start of
    // observation interval tau from the entries of tau - 1.
    let mut tt_tables: Vec<Vec<f64>> = Vec::new();
    // Dijkstra result per (origin node, observation interval): distances and
    // the section taken out of each node.
    type RouteTree = (Vec<f64>, Vec<Option<usize>>);
    let mut route_cache: BTreeMap<(usize, usize), RouteTree> = BTreeMap::new();

    let ensure_tables = |tt_tables: &mut Vec<Vec<f64>>, entry_acc: &[Vec<f64>], upto: usize| {
        while tt_tables.len() <= upto {
            let tau = tt_tables.len();
            let table: Vec<f64> = network
                .sections
                .iter()
                .map(|sec| {
                    let x = if tau == 0 {
                        0.0
                    } else {
                        entry_acc.get(tau - 1).map_or(0.0, |row| row[sec.id])
                    };
                    tt0[sec.id] * (1.0 + BPR_ALPHA * (x / sec.capacity).powi(BPR_BETA))
                })
                .collect();
            tt_tables.push(table);
        }
    };

    while let Some(std::cmp::Reverse(ev)) = heap.pop() {
        let tau = (ev.time / delta).floor() as usize;
        ensure_tables(&mut tt_tables, &entry_acc, tau);
        if ev.leg == 0 {
            // Route choice frozen at departure, using the departure
            // interval's travel times.
            let origin = packets[ev.packet].origin;
            let destination = packets[ev.packet].destination;
            let key = (origin, tau);
            route_cache
                .entry(key)
                .or_insert_with(|| shortest_tree(network, &out_sections, &tt_tables[tau], origin));
            let (dist, parent) = &route_cache[&key];
            packets[ev.packet].path = extract_path(network, parent, dist, origin, destination)?;
        }
        let packet = &packets[ev.packet];
        let section = packet.path[ev.leg];
        if tau < o {
            counts.add(tau, section, packet.flow);
        }
        while entry_acc.len() <= tau {
            entry_acc.push(vec![0.0; n_sec]);
        }
        entry_acc[tau][section] += packet.flow;
        records[ev.packet].entries.push(SectionEntry { section, interval: tau, time: ev.time });
        if ev.leg + 1 < packet.path.len() {
            let next = ev.time + tt_tables[tau][section];
            heap.push(std::cmp::Reverse(Event { time: next, packet: ev.packet, leg: ev.leg + 1 }));
        }
    }

    let log = TripLog {
        estimation_intervals: seq.intervals(),
        observation_intervals: o,
        n_od,
        n_sec,
        records,
    };
    Ok((counts, log))
}

/// Back-calculates the assignment tensor from a trip log: each cell holds the
/// fraction of its pair-interval demand entering a section during an
/// observation interval, so the log's counts are reproduced exactly by
/// `P * demand`.
pub fn back_calculate(seq: &OdSequence, log: &TripLog) -> Result<AssignmentTensor> {
    if log.n_od != seq.n_od() || log.estimation_intervals != seq.intervals() {
        return Err(Error::LogMismatch(format!(
            "log shapes ({}, {}) do not match sequence ({}, {})",
            log.estimation_intervals,
            log.n_od,
            seq.intervals(),
            seq.n_od()
        )));
    }
    let o = log.observation_intervals;
    let n_cells = log.n_od * log.n_od;
    let mut tensor = AssignmentTensor {
        observation_intervals: o,
        estimation_intervals: log.estimation_intervals,
        n_sec: log.n_sec,
        n_cells,
        data: vec![0.0; o * log.estimation_intervals * log.n_sec * n_cells],
    };
    for rec in &log.records {
        let m = seq.get(rec.departure_interval, rec.origin, rec.destination);
        if m <= 0.0 {
            return Err(Error::LogMismatch(format!(
                "packet for pair ({}, {}) in interval {} has zero demand",
                rec.origin, rec.destination, rec.departure_interval
            )));
        }
        let ij = rec.origin * log.n_od + rec.destination;
        let share = rec.flow / m;
        for entry in &rec.entries {
            if entry.interval < o {
                let idx = tensor.idx(entry.interval, rec.departure_interval, entry.section, ij);
                tensor.data[idx] += share;
            }
        }
    }
    Ok(tensor)
}
