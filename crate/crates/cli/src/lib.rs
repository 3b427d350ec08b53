//! Experiment drivers and output writers for the `rheoflow` binary.

pub mod checks;
pub mod config;
pub mod drivers;
pub mod output;

pub use config::RunConfig;
pub use drivers::{run, run_experiment, Findings, RunError, RunOutcome, RunSettings};
