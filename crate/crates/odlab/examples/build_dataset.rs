//! Build a probe-vehicle training dataset: cap the ground truth into the
//! OMS, then repeatedly resample, simulate and normalize into training pairs.
//!
//! Run with: cargo run --example build_dataset

use odlab::model::{true_distributions, TimeGrid};
use odlab::{demand, metrics, netgen, sampler};

fn main() -> Result<(), odlab::error::Error> {
    let raw = netgen::generate_raw(1, 6, 400.0)?;
    let network = netgen::cluster_to_network(&raw, 5, 7)?;
    let grid = TimeGrid::new(4, 24, 4, 600.0)?;
    let truth = demand::make_truth(&network, &grid, 12000.0, 3)?;

    // probe cap m = 20: every OMS cell is either 0 or 20
    let oms = sampler::build_oms(&truth, 20);
    println!(
        "OMS: total {:.0} of {:.0} true trips captured by the probe cap",
        oms.total(),
        truth.total()
    );

    let dataset = sampler::generate_dataset(&network, &truth, &grid, 20, 40, 11)?;
    println!(
        "dataset: {} samples, fingerprint {}",
        dataset.samples.len(),
        dataset.network_fingerprint
    );

    let sample = &dataset.samples[0];
    println!(
        "sample 0: counts distribution {} x {} (sums to {:.6})",
        sample.counts.observation_intervals,
        sample.counts.n_sec,
        sample.counts.data.iter().sum::<f64>()
    );
    println!(
        "sample 0: production target length {}, attraction target length {}",
        sample.production.len(),
        sample.attraction.len()
    );

    // resampled targets scatter around the true distributions
    let (d_p, _) = true_distributions(&truth)?;
    let mut divs: Vec<f64> = dataset
        .samples
        .iter()
        .map(|s| metrics::jsd(s.production.values(), d_p.values()).unwrap())
        .collect();
    divs.sort_by(f64::total_cmp);
    println!(
        "\nJSD(sample production, true production): min {:.5}, median {:.5}, max {:.5}",
        divs[0],
        divs[divs.len() / 2],
        divs[divs.len() - 1]
    );

    let (train, val) = dataset.split(0.8);
    println!("split: {} training samples, {} validation samples", train.len(), val.len());
    Ok(())
}
