//! Train briefly, then infer the global production distribution from the
//! scenario's observed counts and compare it against the truth and against
//! the uninformed uniform guess.
//!
//! Run with: cargo run --example infer_distribution

use odlab::learner::{infer, train, TrainConfig};
use odlab::model::{normalize_counts, true_distributions, FlowKind, GlobalDistribution, TimeGrid};
use odlab::{demand, metrics, netgen, sampler, sim};

fn main() -> Result<(), odlab::error::Error> {
    let raw = netgen::generate_raw(1, 5, 400.0)?;
    let network = netgen::cluster_to_network(&raw, 4, 7)?;
    let grid = TimeGrid::new(3, 12, 3, 600.0)?;
    let truth = demand::make_truth(&network, &grid, 6000.0, 3)?;
    let dataset = sampler::generate_dataset(&network, &truth, &grid, 20, 60, 11)?;

    let cfg = TrainConfig {
        d: 16,
        heads: 2,
        n_enc: 1,
        k_steps: 2,
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs: 40,
        patience: 15,
        split_ratio: 0.8,
        seed: 1,
    };
    let result = train(&dataset, FlowKind::Production, &network, &grid, &cfg)?;
    println!(
        "trained to validation JSD {:.6} at epoch {}",
        result.best_validation, result.best_epoch
    );

    // the scenario input: counts simulated from the full (uncapped) truth
    let (counts, _) = sim::simulate(&network, &truth, &grid)?;
    let d_e = normalize_counts(&counts)?;
    let inferred = infer(&result.params, &network, &grid, &d_e, FlowKind::Production)?;

    let (d_p_true, _) = true_distributions(&truth)?;
    let uniform = GlobalDistribution::uniform(FlowKind::Production, d_p_true.len());
    let jsd_inferred = metrics::jsd(inferred.values(), d_p_true.values())?;
    let jsd_uniform = metrics::jsd(uniform.values(), d_p_true.values())?;

    println!("\n{:<26}{:>12}", "candidate", "JSD to true");
    println!("{:<26}{:>12.6}", "inferred distribution", jsd_inferred);
    println!("{:<26}{:>12.6}", "uniform distribution", jsd_uniform);
    assert!(jsd_inferred < jsd_uniform, "inference should beat the uninformed guess");

    println!("\nper-node production shares, interval 0 (true vs inferred):");
    let n = network.n_od();
    for i in 0..n {
        println!(
            "  node {i}: {:.4} vs {:.4}",
            d_p_true.values()[i],
            inferred.values()[i]
        );
    }
    Ok(())
}
