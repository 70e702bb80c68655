//! Train the distribution learner (DCGRU encoder + attention head) on a
//! small dataset and print the loss curve.
//!
//! Run with: cargo run --example train_learner

use odlab::learner::{train, TrainConfig};
use odlab::model::{FlowKind, TimeGrid};
use odlab::{demand, netgen, sampler};

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
        max_epochs: 15,
        patience: 10,
        split_ratio: 0.8,
        seed: 1,
    };
    println!("training production learner: d={}, heads={}, {} samples", cfg.d, cfg.heads, 60);

    let result = train(&dataset, FlowKind::Production, &network, &grid, &cfg)?;
    println!("\n{:<8}{:>14}{:>18}", "epoch", "train JSD", "validation JSD");
    for stats in &result.curve {
        println!(
            "{:<8}{:>14.6}{:>18.6}",
            stats.epoch, stats.train_loss, stats.validation_loss
        );
    }
    println!(
        "\nbest epoch {} with validation JSD {:.6} (epoch 0 was {:.6})",
        result.best_epoch,
        result.best_validation,
        result.curve[0].validation_loss
    );
    assert!(result.best_validation <= result.curve[0].validation_loss);
    Ok(())
}
