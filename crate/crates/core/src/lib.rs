//! Deterministic simulator for federated averaging under client dropout.
//!
//! Four strategies share one dropout schedule and one set of per-client
//! training streams per seed: `full` (no dropout), `naive_dropout`
//! (average the participants), `stale` (reuse each absent client's last
//! upload) and `fdms` (substitute the update of the most similar present
//! client, with optional candidate elimination).

pub mod aggregate;
pub mod data;
pub mod dropout;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod similarity;
pub mod vector;

pub use aggregate::{aggregate_round, StrategyKind};
pub use error::{Error, Result};
pub use harness::config::ExperimentConfig;
pub use harness::runner::{run_experiment, simulate};
pub use vector::ParamVector;
