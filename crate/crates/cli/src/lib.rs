//! Orchestration of the baseline, oracle and proposed branches: config,
//! cached stage graph, reports and the `distadapt` command line.

pub mod cache;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use cache::{Cache, StageRecord};
pub use config::{Branch, ExperimentConfig, Resolved};
pub use error::{CliError, CliResult};
pub use pipeline::{Experiment, RunManifest, RunSummary};
pub use report::ReportFile;
