//! Thin command-line pipeline over the library: network generation, ground
//! truth, simulation, sampling, training, inference, estimation, reporting.
//!
//! Exit codes: 0 success, 1 domain error (missing/invalid artifacts),
//! 2 usage error (bad flags or configuration).

use clap::{Parser, Subcommand, ValueEnum};
use odlab::config::Config;
use odlab::error::Error;
use odlab::estimator::{self, Targets};
use odlab::model::{
    normalize_counts, true_distributions, DistributionSource, FlowKind, TimeGrid,
};
use odlab::{demand, io, learner, metrics, netgen, report, sampler, sim};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "odlab",
    version,
    about = "Dynamic origin-destination sequence estimation laboratory"
)]
struct Cli {
    /// Configuration file; defaults to the bundled desk scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory artifact paths are resolved against.
    #[arg(long, global = true, env = "ODLAB_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic road network with clustered OD nodes.
    GenNetwork {
        /// Seed for the raw grid perturbations.
        #[arg(long)]
        seed: Option<u64>,
        /// Intersection grid dimension (grid x grid).
        #[arg(long)]
        grid: Option<usize>,
        /// Number of OD nodes to cluster the intersections into.
        #[arg(long)]
        od_nodes: Option<usize>,
        /// Grid spacing in meters.
        #[arg(long)]
        spacing: Option<f64>,
        /// Seed for the k-means clustering.
        #[arg(long)]
        cluster_seed: Option<u64>,
        /// Output network file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the ground-truth OD sequence with a two-peak demand profile.
    MakeTruth {
        /// Total trips across the whole estimation period.
        #[arg(long)]
        total: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the ground truth, writing section counts and the trip log.
    Simulate {
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out_counts: Option<PathBuf>,
        #[arg(long)]
        out_log: Option<PathBuf>,
    },
    /// Build the probe-vehicle training dataset by resampling the OMS.
    Sample {
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Probe cap per OD cell.
        #[arg(long)]
        m: Option<u32>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train distribution learners on a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        network: Option<PathBuf>,
        /// Which flow kind to train.
        #[arg(long, value_enum, default_value_t = KindArg::Both)]
        kind: KindArg,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Infer global distributions from observed counts with trained learners.
    Infer {
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        checkpoint_production: Option<PathBuf>,
        #[arg(long)]
        checkpoint_attraction: Option<PathBuf>,
        #[arg(long)]
        out_production: Option<PathBuf>,
        #[arg(long)]
        out_attraction: Option<PathBuf>,
    },
    /// Estimate the OD sequence from counts via bi-level gradient projection.
    Estimate {
        /// Estimation variant (counts resolution and structure guidance).
        #[arg(long, value_enum)]
        mode: EstimateMode,
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        targets_production: Option<PathBuf>,
        #[arg(long)]
        targets_attraction: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Report accuracy tables, divergence tables and plot data for an estimate.
    Report {
        /// Which estimate to report on.
        #[arg(long, value_enum, default_value_t = EstimateMode::GuidedInferred)]
        mode: EstimateMode,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        estimate: Option<PathBuf>,
        /// Output directory for the report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Production,
    Attraction,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimateMode {
    /// Unguided, counts aggregated to estimation intervals.
    TraditionalEstimationInterval,
    /// Unguided, counts at full observation resolution.
    TraditionalObservationInterval,
    /// Structure targets from the trained learner.
    GuidedInferred,
    /// Structure targets from the ground-truth distributions.
    GuidedTrue,
}

impl EstimateMode {
    fn slug(self) -> &'static str {
        match self {
            EstimateMode::TraditionalEstimationInterval => "traditional-estimation-interval",
            EstimateMode::TraditionalObservationInterval => "traditional-observation-interval",
            EstimateMode::GuidedInferred => "guided-inferred",
            EstimateMode::GuidedTrue => "guided-true",
        }
    }
}

/// Resolved invocation context: configuration plus artifact path defaults.
struct Ctx {
    cfg: Config,
    out: PathBuf,
}

impl Ctx {
    fn new(config: Option<&Path>, out: PathBuf) -> Result<Ctx, Error> {
        let cfg = match config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        Ok(Ctx { cfg, out })
    }

    fn grid(&self) -> Result<TimeGrid, Error> {
        self.cfg.grid.to_grid()
    }

    fn resolve(&self, explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.out.join(default_name))
    }

    fn prepare(&self, path: &Path) -> Result<(), Error> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        Ok(())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 2 on usage errors, 0 on --help/--version
        Err(err) => err.exit(),
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let code = match err {
            Error::InvalidConfig(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let ctx = Ctx::new(cli.config.as_deref(), cli.out_dir)?;
    match cli.command {
        Command::GenNetwork { seed, grid, od_nodes, spacing, cluster_seed, out } => {
            cmd_gen_network(&ctx, seed, grid, od_nodes, spacing, cluster_seed, out)
        }
        Command::MakeTruth { total, seed, network, out } => {
            cmd_make_truth(&ctx, total, seed, network, out)
        }
        Command::Simulate { network, truth, out_counts, out_log } => {
            cmd_simulate(&ctx, network, truth, out_counts, out_log)
        }
        Command::Sample { network, truth, m, n_samples, seed, out } => {
            cmd_sample(&ctx, network, truth, m, n_samples, seed, out)
        }
        Command::Train { dataset, network, kind, max_epochs, seed } => {
            cmd_train(&ctx, dataset, network, kind, max_epochs, seed)
        }
        Command::Infer {
            network,
            counts,
            checkpoint_production,
            checkpoint_attraction,
            out_production,
            out_attraction,
        } => cmd_infer(
            &ctx,
            network,
            counts,
            checkpoint_production,
            checkpoint_attraction,
            out_production,
            out_attraction,
        ),
        Command::Estimate {
            mode,
            network,
            counts,
            truth,
            targets_production,
            targets_attraction,
            out,
            trace,
        } => cmd_estimate(
            &ctx,
            mode,
            network,
            counts,
            truth,
            targets_production,
            targets_attraction,
            out,
            trace,
        ),
        Command::Report { mode, truth, estimate, out } => {
            cmd_report(&ctx, mode, truth, estimate, out)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_network(
    ctx: &Ctx,
    seed: Option<u64>,
    grid: Option<usize>,
    od_nodes: Option<usize>,
    spacing: Option<f64>,
    cluster_seed: Option<u64>,
    out: PathBuf,
) -> Result<(), Error> {
    let ncfg = &ctx.cfg.network;
    let raw = netgen::generate_raw(
        seed.unwrap_or(ncfg.seed),
        grid.unwrap_or(ncfg.grid_dim),
        spacing.unwrap_or(ncfg.spacing_m),
    )?;
    let network = netgen::cluster_to_network(
        &raw,
        od_nodes.unwrap_or(ncfg.od_nodes),
        cluster_seed.unwrap_or(ncfg.cluster_seed),
    )?;
    ctx.prepare(&out)?;
    io::save_network(&out, &network)?;
    println!(
        "wrote {} ({} OD nodes, {} sections)",
        out.display(),
        network.n_od(),
        network.n_sec()
    );
    Ok(())
}

fn cmd_make_truth(
    ctx: &Ctx,
    total: Option<f64>,
    seed: Option<u64>,
    network: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let network_path = ctx.resolve(network, "network.json");
    let out = ctx.resolve(out, "truth.csv");
    let network = io::load_network(&network_path)?;
    let grid = ctx.grid()?;
    let truth = demand::make_truth(
        &network,
        &grid,
        total.unwrap_or(ctx.cfg.demand.total_trips),
        seed.unwrap_or(ctx.cfg.demand.seed),
    )?;
    ctx.prepare(&out)?;
    io::save_sequence(&out, &truth)?;
    let totals: Vec<String> = (0..truth.intervals())
        .map(|t| format!("{:.0}", truth.interval_slice(t).iter().sum::<f64>()))
        .collect();
    println!("wrote {} (totals per interval: {})", out.display(), totals.join(", "));
    Ok(())
}

fn cmd_simulate(
    ctx: &Ctx,
    network: Option<PathBuf>,
    truth: Option<PathBuf>,
    out_counts: Option<PathBuf>,
    out_log: Option<PathBuf>,
) -> Result<(), Error> {
    let network = io::load_network(&ctx.resolve(network, "network.json"))?;
    let truth = io::load_sequence(&ctx.resolve(truth, "truth.csv"))?;
    let out_counts = ctx.resolve(out_counts, "counts.csv");
    let out_log = ctx.resolve(out_log, "triplog.jsonl");
    let grid = ctx.grid()?;
    let (counts, log) = sim::simulate(&network, &truth, &grid)?;
    ctx.prepare(&out_counts)?;
    io::save_counts(&out_counts, &counts)?;
    ctx.prepare(&out_log)?;
    io::save_trip_log(&out_log, &log)?;
    println!("wrote {} (total count {:.0})", out_counts.display(), counts.total());
    println!("wrote {}", out_log.display());
    Ok(())
}

fn cmd_sample(
    ctx: &Ctx,
    network: Option<PathBuf>,
    truth: Option<PathBuf>,
    m: Option<u32>,
    n_samples: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let network = io::load_network(&ctx.resolve(network, "network.json"))?;
    let truth = io::load_sequence(&ctx.resolve(truth, "truth.csv"))?;
    let out = ctx.resolve(out, "dataset");
    let grid = ctx.grid()?;
    let dataset = sampler::generate_dataset(
        &network,
        &truth,
        &grid,
        m.unwrap_or(ctx.cfg.sampler.max_trips),
        n_samples.unwrap_or(ctx.cfg.sampler.n_samples),
        seed.unwrap_or(ctx.cfg.sampler.seed),
    )?;
    io::save_dataset(&out, &dataset, grid.estimation_intervals)?;
    println!("wrote {} ({} samples)", out.display(), dataset.samples.len());
    Ok(())
}

fn train_kind(
    ctx: &Ctx,
    dataset: &sampler::Dataset,
    network: &odlab::model::Network,
    kind: FlowKind,
    cfg: &learner::TrainConfig,
) -> Result<(), Error> {
    let grid = ctx.grid()?;
    let result = learner::train(dataset, kind, network, &grid, cfg)?;
    let name = match kind {
        FlowKind::Production => "production",
        FlowKind::Attraction => "attraction",
    };
    let checkpoint = ctx.out.join(format!("learner_{name}.json"));
    ctx.prepare(&checkpoint)?;
    io::save_checkpoint(&checkpoint, &result.params)?;
    let curve = ctx.out.join(format!("curve_{name}.csv"));
    io::save_training_curve(&curve, &result.curve)?;
    println!(
        "wrote {} (best epoch {}, validation loss {:.6})",
        checkpoint.display(),
        result.best_epoch,
        result.best_validation
    );
    println!("wrote {}", curve.display());
    Ok(())
}

fn cmd_train(
    ctx: &Ctx,
    dataset: Option<PathBuf>,
    network: Option<PathBuf>,
    kind: KindArg,
    max_epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<(), Error> {
    let dataset = io::load_dataset(&ctx.resolve(dataset, "dataset"))?;
    let network = io::load_network(&ctx.resolve(network, "network.json"))?;
    let mut cfg = ctx.cfg.learner.clone();
    if let Some(e) = max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if matches!(kind, KindArg::Production | KindArg::Both) {
        train_kind(ctx, &dataset, &network, FlowKind::Production, &cfg)?;
    }
    if matches!(kind, KindArg::Attraction | KindArg::Both) {
        train_kind(ctx, &dataset, &network, FlowKind::Attraction, &cfg)?;
    }
    Ok(())
}

fn cmd_infer(
    ctx: &Ctx,
    network: Option<PathBuf>,
    counts: Option<PathBuf>,
    checkpoint_production: Option<PathBuf>,
    checkpoint_attraction: Option<PathBuf>,
    out_production: Option<PathBuf>,
    out_attraction: Option<PathBuf>,
) -> Result<(), Error> {
    let network = io::load_network(&ctx.resolve(network, "network.json"))?;
    let counts = io::load_counts(&ctx.resolve(counts, "counts.csv"))?;
    let grid = ctx.grid()?;
    let d_e = normalize_counts(&counts)?;
    let jobs = [
        (
            FlowKind::Production,
            ctx.resolve(checkpoint_production, "learner_production.json"),
            ctx.resolve(out_production, "inferred_production.csv"),
        ),
        (
            FlowKind::Attraction,
            ctx.resolve(checkpoint_attraction, "learner_attraction.json"),
            ctx.resolve(out_attraction, "inferred_attraction.csv"),
        ),
    ];
    for (kind, checkpoint, out) in jobs {
        let params = io::load_checkpoint(&checkpoint)?;
        let dist = learner::infer(&params, &network, &grid, &d_e, kind)?;
        ctx.prepare(&out)?;
        io::save_distribution(&out, &dist, network.n_od())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    ctx: &Ctx,
    mode: EstimateMode,
    network: Option<PathBuf>,
    counts: Option<PathBuf>,
    truth: Option<PathBuf>,
    targets_production: Option<PathBuf>,
    targets_attraction: Option<PathBuf>,
    out: Option<PathBuf>,
    trace: Option<PathBuf>,
) -> Result<(), Error> {
    let network = io::load_network(&ctx.resolve(network, "network.json"))?;
    let counts = io::load_counts(&ctx.resolve(counts, "counts.csv"))?;
    let truth = io::load_sequence(&ctx.resolve(truth, "truth.csv"))?;
    let out = ctx.resolve(out, &format!("estimate_{}.csv", mode.slug()));
    let trace = ctx.resolve(trace, &format!("trace_{}.csv", mode.slug()));
    let grid = ctx.grid()?;
    let mut est_cfg = ctx.cfg.estimator.clone();
    est_cfg.aggregate_counts = mode == EstimateMode::TraditionalEstimationInterval;
    let targets = match mode {
        EstimateMode::TraditionalEstimationInterval
        | EstimateMode::TraditionalObservationInterval => None,
        EstimateMode::GuidedTrue => {
            let (p, a) = true_distributions(&truth)?;
            Some(Targets::new(p, a)?)
        }
        EstimateMode::GuidedInferred => {
            let p = io::load_distribution(
                &ctx.resolve(targets_production, "inferred_production.csv"),
                FlowKind::Production,
                DistributionSource::Inferred,
            )?;
            let a = io::load_distribution(
                &ctx.resolve(targets_attraction, "inferred_attraction.csv"),
                FlowKind::Attraction,
                DistributionSource::Inferred,
            )?;
            Some(Targets::new(p, a)?)
        }
    };
    let result =
        estimator::bilevel_estimate(&network, &counts, &grid, targets, &est_cfg, Some(&truth))?;
    ctx.prepare(&out)?;
    io::save_sequence(&out, &result.estimate)?;
    ctx.prepare(&trace)?;
    io::save_trace(&trace, &result.trace)?;
    if let Some(last) = result.trace.last() {
        let avg_rmsn = last.rmsn.iter().sum::<f64>() / last.rmsn.len().max(1) as f64;
        println!(
            "wrote {} (outer iterations {}, objective {:.4}, avg RMSN {:.4})",
            out.display(),
            result.trace.len(),
            last.objective,
            avg_rmsn
        );
    }
    println!("wrote {}", trace.display());
    Ok(())
}

fn cmd_report(
    ctx: &Ctx,
    mode: EstimateMode,
    truth: Option<PathBuf>,
    estimate: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let truth = io::load_sequence(&ctx.resolve(truth, "truth.csv"))?;
    let estimate =
        io::load_sequence(&ctx.resolve(estimate, &format!("estimate_{}.csv", mode.slug())))?;
    let out = ctx.resolve(out, &format!("report_{}", mode.slug()));
    let inferred_p_path = ctx.out.join("inferred_production.csv");
    let inferred_a_path = ctx.out.join("inferred_attraction.csv");
    let inferred = if inferred_p_path.exists() && inferred_a_path.exists() {
        Some((
            io::load_distribution(
                &inferred_p_path,
                FlowKind::Production,
                DistributionSource::Inferred,
            )?,
            io::load_distribution(
                &inferred_a_path,
                FlowKind::Attraction,
                DistributionSource::Inferred,
            )?,
        ))
    } else {
        None
    };
    let written = report::write_report(
        &out,
        &truth,
        &estimate,
        inferred.as_ref().map(|(p, a)| (p, a)),
    )?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    print!("{}", io::format_summary(&metrics::summary(&truth, &estimate)?));
    for row in report::divergence_table(&truth, &estimate, inferred.as_ref().map(|(p, a)| (p, a)))? {
        let kind = match row.kind {
            FlowKind::Production => "production",
            FlowKind::Attraction => "attraction",
        };
        match row.inferred_vs_true {
            Some(inf) => println!(
                "KL {kind}: optimized {:.6}, inferred {:.6}",
                row.optimized_vs_true, inf
            ),
            None => println!("KL {kind}: optimized {:.6}", row.optimized_vs_true),
        }
    }
    Ok(())
}
