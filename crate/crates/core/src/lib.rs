//! Heterogeneity-aware cooperative federated edge learning.
//!
//! Devices are grouped into clusters, each served by an edge server. Devices
//! run probabilistic local SGD, upload top-k compressed deltas to their edge
//! server, and edge servers gossip over a backhaul graph every `q` edge
//! rounds. A coordinator picks per-device update probabilities and
//! compression ratios each edge round under time and energy budgets.
//!
//! Module map:
//!
//! * [`model`] - model vectors, losses, gradients and the SGD step.
//! * [`data`] - synthetic datasets and Dirichlet non-IID partitioning.
//! * [`compression`] - top-k / random-k sparsifiers and the sparse wire format.
//! * [`topology`] - backhaul graphs, Metropolis mixing matrices, spectral constants.
//! * [`cost`] - time/energy models, device-state sampling and the budget ledger.
//! * [`controller`] - per-device estimation and the alternating P2.1/P2.2 solver.
//! * [`protocol`] - the training loop tying everything together.

pub mod compression;
pub mod controller;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod topology;

pub use error::{Error, Result};
