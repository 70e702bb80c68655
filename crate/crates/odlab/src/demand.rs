//! Synthetic ground-truth demand: a seeded gravity pattern whose interval
//! totals follow a morning/evening double peak and whose hub node attracts
//! commuters in the morning bump and produces them in the evening bump.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Network, OdSequence, TimeGrid};

/// Relative height of the evening bump against the morning bump.
const EVENING_SCALE: f64 = 0.65;
/// Baseline share present in every interval.
const BASE_LEVEL: f64 = 0.25;
/// Extra pull of the hub node at the height of its bump.
const HUB_BOOST: f64 = 2.5;

fn gauss(t: f64, mu: f64, sigma: f64) -> f64 {
    let z = (t - mu) / sigma;
    (-z * z).exp()
}

/// Normalized per-interval demand weights with two bumps: a high one around
/// a quarter of the horizon and a lower one around four fifths.
pub fn interval_profile(intervals: usize) -> Vec<f64> {
    let last = (intervals.max(2) - 1) as f64;
    let sigma = (last / 4.0).max(0.6);
    let mu1 = 0.25 * last;
    let mu2 = 0.80 * last;
    let mut w: Vec<f64> = (0..intervals)
        .map(|t| {
            let tf = t as f64;
            BASE_LEVEL + gauss(tf, mu1, sigma) + EVENING_SCALE * gauss(tf, mu2, sigma)
        })
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Generates a seeded ground-truth OD sequence on the network.
///
/// Cell values are integers (trips); the interval totals follow
/// [`interval_profile`] scaled by `total`, distributed across pairs by a
/// gravity rule (node weights x distance deterrence x seeded noise). The hub
/// node — the one closest to the node centroid — over-attracts during the
/// first bump and over-produces during the second, so the production and
/// attraction distributions carry interval-dependent structure.
pub fn make_truth(network: &Network, grid: &TimeGrid, total: f64, seed: u64) -> Result<OdSequence> {
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::InvalidDemand("total trips must be positive".into()));
    }
    let n = network.n_od();
    if n < 2 {
        return Err(Error::InvalidDemand("need at least two OD nodes".into()));
    }
    let intervals = grid.estimation_intervals;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let prod_base: Vec<f64> = (0..n).map(|_| rng.random_range(0.45..1.8)).collect();
    let attr_base: Vec<f64> = (0..n).map(|_| rng.random_range(0.45..1.8)).collect();

    // hub = node nearest to the centroid of all nodes
    let cx = network.od_nodes.iter().map(|nd| nd.x).sum::<f64>() / n as f64;
    let cy = network.od_nodes.iter().map(|nd| nd.y).sum::<f64>() / n as f64;
    let hub = network
        .od_nodes
        .iter()
        .min_by(|a, b| {
            let da = (a.x - cx).powi(2) + (a.y - cy).powi(2);
            let db = (b.x - cx).powi(2) + (b.y - cy).powi(2);
            da.total_cmp(&db).then(a.id.cmp(&b.id))
        })
        .expect("nonempty network")
        .id;

    // distance deterrence relative to the mean pair distance
    let mut dist = vec![0.0; n * n];
    let mut dist_sum = 0.0;
    let mut dist_cnt = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let a = &network.od_nodes[i];
                let b = &network.od_nodes[j];
                let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                dist[i * n + j] = d;
                dist_sum += d;
                dist_cnt += 1;
            }
        }
    }
    let scale = (dist_sum / dist_cnt as f64).max(1.0);

    let last = (intervals.max(2) - 1) as f64;
    let sigma = (last / 4.0).max(0.6);
    let morning: Vec<f64> = (0..intervals).map(|t| gauss(t as f64, 0.25 * last, sigma)).collect();
    let evening: Vec<f64> = (0..intervals).map(|t| gauss(t as f64, 0.80 * last, sigma)).collect();
    let profile = interval_profile(intervals);

    let mut seq = OdSequence::zeros(intervals, n);
    for t in 0..intervals {
        let mut raw = vec![0.0; n * n];
        let mut raw_total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut p = prod_base[i];
                let mut a = attr_base[j];
                if j == hub {
                    a *= 1.0 + HUB_BOOST * morning[t];
                }
                if i == hub {
                    p *= 1.0 + HUB_BOOST * evening[t];
                }
                let deter = (-dist[i * n + j] / scale).exp();
                let noise = rng.random_range(0.8..1.2);
                let v = p * a * deter * noise;
                raw[i * n + j] = v;
                raw_total += v;
            }
        }
        let target = profile[t] * total;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = raw[i * n + j] / raw_total * target;
                    seq.set(t, i, j, v.round());
                }
            }
        }
    }
    seq.validate()?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgen;

    fn desk_net() -> Network {
        let raw = netgen::generate_raw(1, 6, 400.0).unwrap();
        netgen::cluster_to_network(&raw, 5, 7).unwrap()
    }

    #[test]
    fn profile_is_normalized_two_peaked() {
        for intervals in [3usize, 4, 6, 12] {
            let w = interval_profile(intervals);
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let max = w.iter().cloned().fold(f64::MIN, f64::max);
            let min = w.iter().cloned().fold(f64::MAX, f64::min);
            // at I = 3 the two bumps overlap; the peak contrast shows from 4 up
            if intervals >= 4 {
                assert!(max > 1.5 * min, "profile too flat for I={intervals}: {w:?}");
            }
        }
    }

    #[test]
    fn totals_match_request_within_rounding() {
        let net = desk_net();
        let grid = TimeGrid::new(4, 24, 4, 600.0).unwrap();
        let truth = make_truth(&net, &grid, 12000.0, 99).unwrap();
        let cells = (net.n_od() * (net.n_od() - 1) * grid.estimation_intervals) as f64;
        assert!((truth.total() - 12000.0).abs() <= 0.5 * cells);
    }

    #[test]
    fn peak_interval_exceeds_trough() {
        let net = desk_net();
        let grid = TimeGrid::new(4, 24, 4, 600.0).unwrap();
        let truth = make_truth(&net, &grid, 12000.0, 99).unwrap();
        let totals: Vec<f64> =
            (0..4).map(|t| truth.interval_slice(t).iter().sum::<f64>()).collect();
        let max = totals.iter().cloned().fold(f64::MIN, f64::max);
        let min = totals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max > 1.5 * min, "interval totals {totals:?}");
    }

    #[test]
    fn deterministic_and_integer_valued() {
        let net = desk_net();
        let grid = TimeGrid::new(4, 24, 4, 600.0).unwrap();
        let a = make_truth(&net, &grid, 8000.0, 5).unwrap();
        let b = make_truth(&net, &grid, 8000.0, 5).unwrap();
        assert_eq!(a, b);
        let c = make_truth(&net, &grid, 8000.0, 6).unwrap();
        assert_ne!(a, c);
        for v in a.flat() {
            assert_eq!(*v, v.round());
        }
    }

    #[test]
    fn rejects_bad_total() {
        let net = desk_net();
        let grid = TimeGrid::new(4, 24, 4, 600.0).unwrap();
        assert!(make_truth(&net, &grid, 0.0, 1).is_err());
        assert!(make_truth(&net, &grid, -5.0, 1).is_err());
    }
}
