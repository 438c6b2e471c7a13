//! Simulation of federated averaging with over-the-air aggregation under
//! energy-harvesting constraints.
//!
//! Scheduled users train locally, pack their model updates into complex
//! symbols, and transmit simultaneously over a fading multiple-access
//! channel; the receiver combines across antennas and recovers a noisy
//! average that drives the global model. Batteries gate participation:
//! a unit-capacity battery per user fills by Bernoulli energy arrivals and
//! one transmission drains it.
//!
//! Modules:
//! - [`model`]: multinomial logistic regression, local SGD, update packing.
//! - [`data`]: synthetic blobs, IDX image loading, non-IID partitioning.
//! - [`channel`]: fading MAC draw, superposition, multi-antenna combining,
//!   aggregate estimation.
//! - [`energy`]: battery state, harvesting, feasibility, consumption.
//! - [`scheduling`]: entropy-maximizing subsets; participation-record
//!   least-squares representations, clustering, cluster-based sampling.
//! - [`analysis`]: convergence-bound terms, contraction recursion, and
//!   empirical constant estimation.
//! - [`orchestrator`]: the round loop tying the above together.
//! - [`metrics`], [`config`]: run records and experiment configuration.
//!
//! Every stochastic component draws from a dedicated stream derived from the
//! experiment master seed ([`rng::subseed`]), so runs are reproducible
//! byte-for-byte, with or without the `parallel` feature.

pub mod analysis;
pub mod channel;
pub mod config;
pub mod data;
pub mod energy;
mod error;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod par;
pub mod rng;
pub mod scheduling;

pub use error::{Error, Result};
