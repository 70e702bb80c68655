//! Laboratory for dynamic origin-destination sequence estimation.
//!
//! The crate covers the full loop of a simulation-based OD estimation study:
//!
//! 1. [`netgen`] draws a synthetic raw road grid and aggregates it into a
//!    small OD network by clustering intersections.
//! 2. [`demand`] builds a ground-truth OD sequence with realistic peaking.
//! 3. [`sim`] runs a deterministic mesoscopic simulator that turns OD
//!    sequences into per-section counts and an assignment tensor.
//! 4. [`sampler`] mimics a probe-vehicle observation system and produces
//!    training datasets from partially observed demand.
//! 5. [`learner`] trains a recurrent graph network with self-attention that
//!    maps observed counts to global production/attraction distributions.
//! 6. [`estimator`] solves the bi-level estimation problem with a projected
//!    gradient method, optionally guided by the learned distributions.
//! 7. [`metrics`] and [`report`] score and summarize the results.
//!
//! The `odlab` binary wires these into a reproducible command pipeline; the
//! examples directory shows each stage in isolation.

pub mod config;
pub mod demand;
pub mod error;
pub mod estimator;
pub mod io;
pub mod learner;
pub mod metrics;
pub mod model;
pub mod netgen;
pub mod report;
pub mod sampler;
pub mod sim;

pub use error::{Error, Result};
