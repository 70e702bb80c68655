//! Probe-vehicle observation sampling: the capped OMS sequence, its seeded
//! resampling, and training-dataset generation.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    normalize_counts, production_attraction, to_distribution, CountsDistribution,
    DistributionSource, FlowKind, GlobalDistribution, Network, OdSequence, TimeGrid,
};
use crate::sim::simulate;

/// One training pair: a counts distribution and the two global distributions
/// of the demand that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub counts: CountsDistribution,
    pub production: GlobalDistribution,
    pub attraction: GlobalDistribution,
}

/// A generated training dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub m: u32,
    pub network_fingerprint: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Splits by position: the first `ratio` share trains, the rest validates.
    pub fn split(&self, ratio: f64) -> (&[Sample], &[Sample]) {
        assert!(ratio > 0.0 && ratio < 1.0);
        let cut = ((self.samples.len() as f64) * ratio).round() as usize;
        let cut = cut.clamp(1, self.samples.len() - 1);
        self.samples.split_at(cut)
    }
}

/// Stable 64-bit FNV-1a fingerprint of a network's structure, hex encoded.
pub fn network_fingerprint(network: &Network) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for n in &network.od_nodes {
        eat(&n.id.to_le_bytes());
        eat(&n.x.to_bits().to_le_bytes());
        eat(&n.y.to_bits().to_le_bytes());
    }
    for s in &network.sections {
        eat(&s.id.to_le_bytes());
        eat(&s.from_node.to_le_bytes());
        eat(&s.to_node.to_le_bytes());
        eat(&s.length.to_bits().to_le_bytes());
        eat(&s.free_flow_speed.to_bits().to_le_bytes());
        eat(&s.capacity.to_bits().to_le_bytes());
    }
    format!("{h:016x}")
}

/// Builds the probe-capped sequence: a cell becomes `m` where the truth
/// strictly exceeds `m` and 0 elsewhere.
pub fn build_oms(truth: &OdSequence, m: u32) -> OdSequence {
    let cap = m as f64;
    let mut oms = OdSequence::zeros(truth.intervals(), truth.n_od());
    for t in 0..truth.intervals() {
        for i in 0..truth.n_od() {
            for j in 0..truth.n_od() {
                if i != j && truth.get(t, i, j) > cap {
                    oms.set(t, i, j, cap);
                }
            }
        }
    }
    oms
}

/// Scales every nonzero cell by an independent seeded uniform draw in [0, 1)
/// and rounds to the nearest integer. Zero cells are left untouched.
pub fn resample(oms: &OdSequence, seed: u64) -> OdSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OdSequence::zeros(oms.intervals(), oms.n_od());
    for t in 0..oms.intervals() {
        for i in 0..oms.n_od() {
            for j in 0..oms.n_od() {
                let v = oms.get(t, i, j);
                if v > 0.0 {
                    let u: f64 = rng.random();
                    out.set(t, i, j, (v * u).round());
                }
            }
        }
    }
    out
}

/// Generates `n_samples` training pairs by repeatedly resampling the OMS,
/// simulating the resampled demand and normalizing the resulting counts and
/// flows. Samples whose demand or counts vanish are regenerated from the next
/// seed in that sample's stream, so the dataset is deterministic in
/// `(inputs, seed)`.
pub fn generate_dataset(
    network: &Network,
    truth: &OdSequence,
    grid: &TimeGrid,
    m: u32,
    n_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one sample".into()));
    }
    let oms = build_oms(truth, m);
    if oms.total() <= 0.0 {
        return Err(Error::EmptyOms);
    }
    let fingerprint = network_fingerprint(network);
    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let mut seed_stream = ChaCha8Rng::seed_from_u64(seed);
        seed_stream.set_stream(s as u64);
        let mut built = None;
        for _attempt in 0..64 {
            let sample_seed = seed_stream.next_u64();
            let demand = resample(&oms, sample_seed);
            if demand.total() <= 0.0 {
                continue;
            }
            let (counts, _) = simulate(network, &demand, grid)?;
            if counts.total() <= 0.0 {
                continue;
            }
            let d_e = normalize_counts(&counts)?;
            let (p, a) = production_attraction(&demand);
            let d_p = to_distribution(&p, FlowKind::Production, DistributionSource::True)?;
            let d_a = to_distribution(&a, FlowKind::Attraction, DistributionSource::True)?;
            built = Some(Sample { counts: d_e, production: d_p, attraction: d_a });
            break;
        }
        match built {
            Some(sample) => samples.push(sample),
            None => {
                return Err(Error::InvalidDemand(format!(
                    "sample {s} kept degenerating across 64 resampling attempts"
                )))
            }
        }
    }
    Ok(Dataset { seed, m, network_fingerprint: fingerprint, samples })
}
