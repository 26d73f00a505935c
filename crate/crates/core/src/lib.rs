//! Deterministic desk-scale simulator of clustered federated learning (CFL)
//! over a modeled wireless edge network.
//!
//! A population of clients holds synthetic non-i.i.d. data ([`dataset`]) and
//! trains small models locally ([`learner`]). Upload and compute latencies
//! come from a narrowband radio model ([`radio`]). Each round a server picks
//! participants, packs them onto a limited set of sub-channels and simulates
//! the resulting upload queue ([`scheduler`]), aggregates the surviving
//! updates, and recursively splits clusters of clients whose weight updates
//! point in irreconcilable directions ([`clusterer`]). The round loop, the
//! stop conditions and the final per-client evaluation live in [`engine`];
//! run artifacts (CSV traces, manifest, model checkpoints) in [`artifacts`].
//!
//! Everything is keyed off a single master seed: two runs with the same
//! config and seed produce byte-identical artifacts.

// Validation guards are spelled `!(x > 0.0)` on purpose: the negation also
// rejects NaN, which `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod clusterer;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod learner;
pub mod radio;
pub mod rng;
pub mod scheduler;

/// Stable integer id of a client, dense in `0..K`.
pub type ClientId = u32;

/// Stable integer id of a cluster. Ids are never reused after a split.
pub type ClusterId = u32;

pub use clusterer::{rand_index, ClusterTree, SimilarityMatrix, SplitDecision};
pub use config::ExperimentConfig;
pub use dataset::{DatasetSpec, FederatedDataset, Incongruence};
pub use engine::{run_experiment, ExperimentTrace, StopReason};
pub use error::{Error, Result};
pub use learner::{ModelParams, ModelShape, ModelUpdate};
pub use radio::{ChannelState, ClientProfile, RadioConfig};
pub use scheduler::{DeadlinePolicy, Policy, RoundOutcome, RoundSchedule};
