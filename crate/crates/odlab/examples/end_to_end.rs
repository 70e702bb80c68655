//! The full laboratory pipeline at reduced scale: network, ground truth,
//! simulation, probe dataset, learner training, inference, guided estimation
//! and reporting, all through the library API.
//!
//! Run with: cargo run --example end_to_end

use odlab::estimator::{bilevel_estimate, EstimatorConfig, Targets};
use odlab::learner::{infer, train, TrainConfig};
use odlab::model::{normalize_counts, true_distributions, FlowKind, TimeGrid};
use odlab::{demand, metrics, netgen, report, sampler, sim};

fn main() -> Result<(), odlab::error::Error> {
    let out = std::env::temp_dir().join("odlab_end_to_end");
    std::fs::create_dir_all(&out)?;

    // 1. network
    let raw = netgen::generate_raw(1, 5, 400.0)?;
    let network = netgen::cluster_to_network(&raw, 4, 7)?;
    println!("[1/8] network: {} OD nodes, {} sections", network.n_od(), network.n_sec());

    // 2. ground truth demand
    let grid = TimeGrid::new(3, 12, 3, 600.0)?;
    let truth = demand::make_truth(&network, &grid, 6000.0, 3)?;
    println!("[2/8] truth: {:.0} trips over {} intervals", truth.total(), truth.intervals());

    // 3. simulate the truth into observed counts
    let (counts, _log) = sim::simulate(&network, &truth, &grid)?;
    println!("[3/8] counts: total {:.0}", counts.total());

    // 4. probe-vehicle dataset
    let dataset = sampler::generate_dataset(&network, &truth, &grid, 20, 60, 11)?;
    println!("[4/8] dataset: {} samples", dataset.samples.len());

    // 5. train both learners
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
    let prod = train(&dataset, FlowKind::Production, &network, &grid, &cfg)?;
    let attr = train(&dataset, FlowKind::Attraction, &network, &grid, &cfg)?;
    println!(
        "[5/8] trained: production val JSD {:.5}, attraction val JSD {:.5}",
        prod.best_validation, attr.best_validation
    );

    // 6. infer global distributions from the observed counts
    let d_e = normalize_counts(&counts)?;
    let d_p = infer(&prod.params, &network, &grid, &d_e, FlowKind::Production)?;
    let d_a = infer(&attr.params, &network, &grid, &d_e, FlowKind::Attraction)?;
    let (tp, ta) = true_distributions(&truth)?;
    println!(
        "[6/8] inferred: JSD to true = {:.5} (production), {:.5} (attraction)",
        metrics::jsd(d_p.values(), tp.values())?,
        metrics::jsd(d_a.values(), ta.values())?
    );

    // 7. guided bi-level estimation against the inferred targets
    let est_cfg = EstimatorConfig::default();
    let result = bilevel_estimate(
        &network,
        &counts,
        &grid,
        Some(Targets::new(d_p.clone(), d_a.clone())?),
        &est_cfg,
        Some(&truth),
    )?;
    let summary = metrics::summary(&truth, &result.estimate)?;
    println!(
        "[7/8] estimate: avg RMSN {:.4}, avg rho {:.4} after {} outer iterations",
        summary.average.rmsn,
        summary.average.correlation,
        result.trace.len()
    );

    // 8. report artifacts
    let written = report::write_report(&out, &truth, &result.estimate, Some((&d_p, &d_a)))?;
    println!("[8/8] report: {} files under {}", written.len(), out.display());
    for path in &written {
        println!("  {}", path.file_name().unwrap().to_string_lossy());
    }
    Ok(())
}
