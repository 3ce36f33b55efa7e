//! Hosting-capacity analysis for radial distribution feeders.
//!
//! The crate is organized bottom-up:
//!
//! - [`network`] and [`der`]: feeder and device models
//! - [`conic`]: conic program container, continuous backend, branch and bound
//! - [`powerflow`]: branch-flow relaxation and static feasibility
//! - [`opf`]: multiperiod dispatch with flexible devices
//! - [`hca`]: iterative hosting-capacity search
//! - [`scenarios`]: scenario generation, reduction and HC distributions
//! - [`ssp`]: two-stage stochastic siting and sizing
//! - [`analysis`]: correlations, sweeps and volume ratios
//! - [`io`]: timeseries ingestion, run configuration and manifests

pub mod analysis;
pub mod conic;
pub mod der;
pub mod error;
pub mod fixtures;
pub mod hca;
pub mod io;
pub mod network;
pub mod opf;
pub mod powerflow;
pub mod scenarios;
pub mod ssp;
pub mod stats;

pub use conic::{ConicProgram, LinExpr, Solution, SolveStatus, SolverSettings, VarId, WarmStart};
pub use der::{BatteryParams, DerFleet, DerKind, EVParams, HPParams, ObjectiveWeights, PVParams};
pub use error::{Error, Result};
pub use network::{parse_network, Branch, Bus, Network, PccLimits};
