//! Generate a synthetic road network: perturbed grid of intersections,
//! k-means aggregation into OD nodes, section capacities from road length.
//!
//! Run with: cargo run --example gen_network

use odlab::netgen;

fn main() -> Result<(), odlab::error::Error> {
    // a 6x6 intersection grid, 400 m spacing, lightly perturbed by seed 1
    let raw = netgen::generate_raw(1, 6, 400.0)?;
    println!(
        "raw graph: {} intersections, {} directed roads",
        raw.intersections.len(),
        raw.roads.len()
    );

    // aggregate the intersections into 5 OD nodes via seeded k-means
    let network = netgen::cluster_to_network(&raw, 5, 7)?;
    println!("network: {} OD nodes, {} sections\n", network.n_od(), network.n_sec());

    println!("{:<6}{:>12}{:>12}", "node", "x [m]", "y [m]");
    for node in &network.od_nodes {
        println!("{:<6}{:>12.1}{:>12.1}", node.id, node.x, node.y);
    }
    println!();
    println!(
        "{:<10}{:>6}{:>6}{:>12}{:>14}{:>16}",
        "section", "from", "to", "length [m]", "speed [m/s]", "capacity [veh]"
    );
    for sec in &network.sections {
        println!(
            "{:<10}{:>6}{:>6}{:>12.1}{:>14.1}{:>16.1}",
            sec.id, sec.from_node, sec.to_node, sec.length, sec.free_flow_speed, sec.capacity
        );
    }

    // identical inputs give identical networks
    let again = netgen::cluster_to_network(&netgen::generate_raw(1, 6, 400.0)?, 5, 7)?;
    assert_eq!(network, again);
    println!("\ndeterminism check passed: regeneration is identical");
    Ok(())
}
