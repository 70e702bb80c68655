//! Synthetic network generation: a raw intersection grid plus K-means
//! aggregation into a small OD network.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Network, OdNode, Section};

/// Capacity contributed by each raw road crossing a cluster boundary,
/// vehicles per observation interval.
pub const BASE_CAPACITY: f64 = 120.0;

/// A raw intersection before aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Intersection {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

/// A directed raw road between two intersections.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRoad {
    pub from: usize,
    pub to: usize,
    /// Meters.
    pub length: f64,
    /// Free-flow speed, m/s.
    pub speed: f64,
}

/// Un-aggregated road graph: intersections plus directed raw roads.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGraph {
    pub intersections: Vec<Intersection>,
    pub roads: Vec<RawRoad>,
}

impl RawGraph {
    pub fn new(intersections: Vec<Intersection>, roads: Vec<RawRoad>) -> Result<Self> {
        let g = RawGraph { intersections, roads };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.intersections.len();
        if n == 0 {
            return Err(Error::InvalidNetwork("raw graph has no intersections".into()));
        }
        for (k, it) in self.intersections.iter().enumerate() {
            if it.id != k {
                return Err(Error::InvalidNetwork("intersection ids must be dense".into()));
            }
        }
        for r in &self.roads {
            if r.from >= n || r.to >= n || r.from == r.to {
                return Err(Error::InvalidNetwork(format!(
                    "raw road {} -> {} is invalid",
                    r.from, r.to
                )));
            }
            let finite_positive = |v: f64| v.is_finite() && v > 0.0;
            if !finite_positive(r.length) || !finite_positive(r.speed) {
                return Err(Error::InvalidNetwork(
                    "raw roads need positive length and speed".into(),
                ));
            }
        }
        // Connectivity over the undirected skeleton.
        let mut adj = vec![Vec::new(); n];
        for r in &self.roads {
            adj[r.from].push(r.to);
            adj[r.to].push(r.from);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidNetwork("raw graph is not connected".into()));
        }
        Ok(())
    }
}

/// Generates a `grid_dim x grid_dim` lattice of intersections spaced
/// `spacing_m` apart, with bidirectional roads between lattice neighbors and
/// seeded uniform speeds in [8, 16) m/s.
pub fn generate_raw(seed: u64, grid_dim: usize, spacing_m: f64) -> Result<RawGraph> {
    if grid_dim < 2 {
        return Err(Error::InvalidNetwork("grid dimension must be at least 2".into()));
    }
    if !spacing_m.is_finite() || spacing_m <= 0.0 {
        return Err(Error::InvalidNetwork("grid spacing must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = |row: usize, col: usize| row * grid_dim + col;
    let mut intersections = Vec::with_capacity(grid_dim * grid_dim);
    for row in 0..grid_dim {
        for col in 0..grid_dim {
            intersections.push(Intersection {
                id: idx(row, col),
                x: col as f64 * spacing_m,
                y: row as f64 * spacing_m,
            });
        }
    }
    let mut roads = Vec::new();
    let add_pair = |roads: &mut Vec<RawRoad>, rng: &mut ChaCha8Rng, a: usize, b: usize| {
        let fwd = rng.random_range(8.0..16.0);
        let back = rng.random_range(8.0..16.0);
        roads.push(RawRoad { from: a, to: b, length: spacing_m, speed: fwd });
        roads.push(RawRoad { from: b, to: a, length: spacing_m, speed: back });
    };
    for row in 0..grid_dim {
        for col in 0..grid_dim {
            if col + 1 < grid_dim {
                add_pair(&mut roads, &mut rng, idx(row, col), idx(row, col + 1));
            }
            if row + 1 < grid_dim {
                add_pair(&mut roads, &mut rng, idx(row, col), idx(row + 1, col));
            }
        }
    }
    RawGraph::new(intersections, roads)
}

/// Cluster centers paired with the per-point cluster assignment.
pub type Clustering = (Vec<(f64, f64)>, Vec<usize>);

/// Lloyd K-means over planar points with farthest-point initialization.
///
/// Returns `(centers, assignment)`. Deterministic for a fixed seed: the first
/// center is drawn from the seeded generator, the rest greedily maximize the
/// distance to the nearest chosen center (ties to the smallest id), and
/// assignment ties go to the smallest cluster index. Converges when
/// assignments stop changing, capped at 100 sweeps. If a cluster ends up
/// empty the run is restarted with a fresh seeded start, up to 10 attempts.
pub fn kmeans(points: &[(f64, f64)], k: usize, seed: u64) -> Result<Clustering> {
    let n = points.len();
    assert!(k >= 1 && k <= n, "k must be in 1..=points");
    let dist2 = |a: (f64, f64), b: (f64, f64)| {
        let dx = a.0 - b.0;
        let dy = a.1 - b.1;
        dx * dx + dy * dy
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..10 {
        // Farthest-point initialization.
        let mut centers: Vec<(f64, f64)> = vec![points[rng.random_range(0..n)]];
        while centers.len() < k {
            let mut best = 0usize;
            let mut best_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                let d = centers.iter().map(|c| dist2(*p, *c)).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = i;
                }
            }
            centers.push(points[best]);
        }
        // Lloyd sweeps.
        let mut assignment = vec![usize::MAX; n];
        for _sweep in 0..100 {
            let mut next = vec![0usize; n];
            for (i, p) in points.iter().enumerate() {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = dist2(*p, *center);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                next[i] = best;
            }
            let converged = next == assignment;
            assignment = next;
            let mut sums = vec![(0.0, 0.0, 0usize); k];
            for (i, &c) in assignment.iter().enumerate() {
                sums[c].0 += points[i].0;
                sums[c].1 += points[i].1;
                sums[c].2 += 1;
            }
            for (c, (sx, sy, cnt)) in sums.into_iter().enumerate() {
                if cnt > 0 {
                    centers[c] = (sx / cnt as f64, sy / cnt as f64);
                }
            }
            if converged {
                break;
            }
        }
        let mut counts = vec![0usize; k];
        for &c in &assignment {
            counts[c] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            return Ok((centers, assignment));
        }
    }
    let empty = 0; // report cluster 0 of the final failed attempt
    Err(Error::EmptyCluster(empty))
}

/// Aggregates a raw graph into an OD network given a cluster assignment.
///
/// One directed section is created per ordered cluster pair with at least one
/// crossing raw road; its length and speed are the means over the crossing
/// roads and its capacity is their count times `base_capacity`.
pub fn aggregate(
    raw: &RawGraph,
    assignment: &[usize],
    n_od: usize,
    base_capacity: f64,
) -> Result<Network> {
    assert_eq!(assignment.len(), raw.intersections.len());
    let mut nodes = Vec::with_capacity(n_od);
    for c in 0..n_od {
        let members: Vec<&Intersection> = raw
            .intersections
            .iter()
            .filter(|it| assignment[it.id] == c)
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyCluster(c));
        }
        let m = members.len() as f64;
        nodes.push(OdNode {
            id: c,
            x: members.iter().map(|it| it.x).sum::<f64>() / m,
            y: members.iter().map(|it| it.y).sum::<f64>() / m,
        });
    }
    // (len sum, speed sum, crossing count) per ordered cluster pair.
    let mut pair_stats = std::collections::BTreeMap::<(usize, usize), (f64, f64, usize)>::new();
    for road in &raw.roads {
        let a = assignment[road.from];
        let b = assignment[road.to];
        if a != b {
            let s = pair_stats.entry((a, b)).or_insert((0.0, 0.0, 0));
            s.0 += road.length;
            s.1 += road.speed;
            s.2 += 1;
        }
    }
    let mut sections = Vec::with_capacity(pair_stats.len());
    for ((a, b), (len_sum, speed_sum, count)) in pair_stats {
        let c = count as f64;
        sections.push(Section {
            id: sections.len(),
            from_node: a,
            to_node: b,
            length: len_sum / c,
            free_flow_speed: speed_sum / c,
            capacity: c * base_capacity,
        });
    }
    Network::new(nodes, sections)
}

/// Clusters a raw graph into `n_od` OD nodes and aggregates the crossing
/// roads into directed sections, with the default crossing capacity.
pub fn cluster_to_network(raw: &RawGraph, n_od: usize, seed: u64) -> Result<Network> {
    cluster_to_network_with_capacity(raw, n_od, seed, BASE_CAPACITY)
}

/// As [`cluster_to_network`] with an explicit per-crossing capacity.
pub fn cluster_to_network_with_capacity(
    raw: &RawGraph,
    n_od: usize,
    seed: u64,
    base_capacity: f64,
) -> Result<Network> {
    if n_od < 2 || n_od > raw.intersections.len() {
        return Err(Error::InvalidNetwork(format!(
            "od count {n_od} must be between 2 and the intersection count {}",
            raw.intersections.len()
        )));
    }
    let points: Vec<(f64, f64)> = raw.intersections.iter().map(|it| (it.x, it.y)).collect();
    let (_, assignment) = kmeans(&points, n_od, seed)?;
    aggregate(raw, &assignment, n_od, base_capacity)
}
