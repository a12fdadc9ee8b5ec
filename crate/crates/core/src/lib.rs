//! Trajectory-aware reliability modeling for interacting-indicator panels.
//!
//! The crate fits a two-stage dynamic causal network autoregression (DCNAR)
//! to longitudinal indicator panels and turns it into failure-risk forecasts:
//!
//! 1. [`discovery`] learns a directed influence network among indicators from
//!    sparse additive nonlinear autoregressions.
//! 2. [`nar`] fits a time-varying network autoregression constrained to that
//!    network.
//! 3. [`risk`] simulates forward trajectory ensembles and scores the
//!    probability of crossing per-indicator degradation thresholds within a
//!    horizon.
//!
//! [`survival`] provides Cox proportional-hazards and discrete-time hazard
//! baselines that score risk from the current state, [`metrics`] computes
//! AUROC/AUPRC/Brier/ECE comparisons, and [`synth`] generates panels from
//! known ground-truth propagation networks for end-to-end verification.

pub mod discovery;
pub mod error;
mod linalg;
pub mod metrics;
pub mod nar;
pub mod panel;
pub mod pipeline;
pub mod risk;
pub mod rng;
pub mod spline;
pub mod stats;
pub mod survival;
pub mod synth;

pub use error::{Error, Result};
