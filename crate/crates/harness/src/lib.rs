//! Experiment runner for the `slds-ep` algorithms: suite runs with
//! per-iteration KL and free energy, difficult-instance search, and text
//! reports for the exact oracle and Hessian diagnostics.

pub mod config;
pub mod experiment;
pub mod instances;
pub mod report;
pub mod search;

pub use config::{ExperimentConfig, InstanceSource, Method, Shape};
pub use experiment::{read_rows, run_experiment, ResultRow};
pub use search::search_difficult;
