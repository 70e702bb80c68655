//! Scenario configuration: one JSON document drives the whole pipeline.

use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::learner::TrainConfig;
use crate::model::{Network, TimeGrid};
use crate::netgen::{cluster_to_network, generate_raw};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Synthetic road-network generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Seed of the raw lattice's speed draws.
    pub seed: u64,
    /// Intersections per side of the square lattice.
    pub grid_dim: usize,
    /// Block edge length in meters.
    pub spacing_m: f64,
    /// Number of aggregated OD nodes (clusters).
    pub od_nodes: usize,
    /// Seed of the clustering initialization.
    pub cluster_seed: u64,
}

/// Time discretization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Estimation intervals `I`.
    pub estimation_intervals: usize,
    /// Observation intervals `o`; must be a multiple of `I`.
    pub observation_intervals: usize,
    /// Learner window length `delta` in observation intervals.
    pub window_len: usize,
    /// Duration of one observation interval in seconds.
    pub interval_seconds: f64,
}

impl GridConfig {
    pub fn to_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(
            self.estimation_intervals,
            self.observation_intervals,
            self.window_len,
            self.interval_seconds,
        )
    }
}

/// Ground-truth demand generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandConfig {
    pub seed: u64,
    /// Total trips over the whole horizon before rounding.
    pub total_trips: f64,
}

/// Probe-vehicle sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Maximum observable trips per OD cell (`m`).
    pub max_trips: u32,
    /// Training samples to generate.
    pub n_samples: usize,
}

/// Everything one scenario needs, bundled for JSON round-trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub network: NetworkConfig,
    pub grid: GridConfig,
    pub demand: DemandConfig,
    pub sampler: SamplerConfig,
    pub learner: TrainConfig,
    pub estimator: EstimatorConfig,
}

impl Default for Config {
    /// The bundled desk-scale scenario: 5 OD nodes, 4 estimation intervals of
    /// 6 observation intervals each, 500 samples at `m = 20`.
    fn default() -> Self {
        Config {
            network: NetworkConfig {
                seed: 1,
                grid_dim: 6,
                spacing_m: 400.0,
                od_nodes: 5,
                cluster_seed: 7,
            },
            grid: GridConfig {
                estimation_intervals: 4,
                observation_intervals: 24,
                window_len: 4,
                interval_seconds: 60.0,
            },
            demand: DemandConfig { seed: 3, total_trips: 6000.0 },
            sampler: SamplerConfig { seed: 11, max_trips: 20, n_samples: 500 },
            learner: TrainConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput {
                path: path.display().to_string(),
                hint: "pass --config or use the bundled desk configuration".to_string(),
            });
        }
        let config: Config = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.grid_dim < 2 {
            return Err(Error::InvalidConfig("grid_dim must be at least 2".into()));
        }
        if !(self.network.spacing_m.is_finite() && self.network.spacing_m > 0.0) {
            return Err(Error::InvalidConfig("spacing_m must be positive".into()));
        }
        if self.network.od_nodes < 2
            || self.network.od_nodes > self.network.grid_dim * self.network.grid_dim
        {
            return Err(Error::InvalidConfig(format!(
                "od_nodes must be between 2 and {}",
                self.network.grid_dim * self.network.grid_dim
            )));
        }
        self.grid.to_grid()?;
        if !(self.demand.total_trips.is_finite() && self.demand.total_trips > 0.0) {
            return Err(Error::InvalidConfig("total_trips must be positive".into()));
        }
        if self.sampler.max_trips == 0 {
            return Err(Error::InvalidConfig("max_trips must be positive".into()));
        }
        if self.sampler.n_samples < 2 {
            return Err(Error::InvalidConfig("n_samples must be at least 2".into()));
        }
        if self.learner.d == 0 || self.learner.heads == 0 || !self.learner.d.is_multiple_of(self.learner.heads)
        {
            return Err(Error::InvalidConfig(
                "learner dimension must be a positive multiple of the head count".into(),
            ));
        }
        if !(self.learner.split_ratio > 0.0 && self.learner.split_ratio < 1.0) {
            return Err(Error::InvalidConfig("split_ratio must be inside (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.estimator.alpha) {
            return Err(Error::InvalidConfig("estimator alpha must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Generate the scenario's aggregated network.
    pub fn build_network(&self) -> Result<Network> {
        let raw = generate_raw(self.network.seed, self.network.grid_dim, self.network.spacing_m)?;
        cluster_to_network(&raw, self.network.od_nodes, self.network.cluster_seed)
    }
}
