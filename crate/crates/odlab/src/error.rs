use thiserror::Error;

/// Errors produced by any odlab subsystem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty observation: all traffic counts are zero")]
    EmptyObservation,

    #[error("degenerate flows: flow total is zero")]
    DegenerateFlows,

    #[error("degenerate iterate: production or attraction total is zero")]
    DegenerateIterate,

    #[error("degenerate variance: correlation is undefined on a constant slice")]
    DegenerateVariance,

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid demand sequence: {0}")]
    InvalidDemand(String),

    #[error("invalid time grid: {0}")]
    InvalidTimeGrid(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no directed path from od node {from} to od node {to}")]
    NoPath { from: usize, to: usize },

    #[error("trip log inconsistent with demand: {0}")]
    LogMismatch(String),

    #[error("clustering failed: empty cluster after {0} re-seed attempts")]
    EmptyCluster(usize),

    #[error("no important pairs at this m: original matrices sequence is all zero")]
    EmptyOms,

    #[error("observation window for estimation interval {t} overruns the grid ({end} >= {o})")]
    WindowOverrun { t: usize, end: usize, o: usize },

    #[error("training aborted: non-finite loss at epoch {epoch} ({loss})")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing upstream file {path}: {hint}")]
    MissingInput { path: String, hint: String },

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
