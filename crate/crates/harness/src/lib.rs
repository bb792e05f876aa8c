//! Experiment harness for the hcef simulator: JSON experiment specs, sweep
//! execution with per-run trace files, plot-data emission and a brute-force
//! check of the per-round controller.

pub mod config;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod plotdata;

pub use error::{HarnessError, Result};
