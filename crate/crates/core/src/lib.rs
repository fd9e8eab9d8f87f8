//! Tooling for building hostile multi-core environments: tune stressor
//! ("enemy") processes per shared resource, assemble the per-core mix that
//! degrades each resource the most, and measure how much a system under test
//! slows down inside it.
//!
//! The crate is split along the pipeline stages:
//!
//! * [`kernels`]: enemy and victim access patterns plus their parameter spaces
//! * [`harness`]: the measurement protocol (pinning, readiness, temperature
//!   guards, confidence-interval driven sample counts)
//! * [`backends`]: process-spawning execution on real hardware and a seeded
//!   synthetic model for fast, deterministic runs
//! * [`search`]: random search, simulated annealing and Bayesian optimisation
//!   over enemy parameters
//! * [`environment`]: environment enumeration, per-resource ranking and
//!   Pareto selection
//! * [`stats`]: quantiles, order-statistic confidence intervals, rank-sum
//!   tests and verdict assembly
//! * [`campaign`]: the checkpointed end-to-end run that ties it all together

pub mod backends;
pub mod campaign;
pub mod environment;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod search;
pub mod stats;

pub use error::{Error, Result};
