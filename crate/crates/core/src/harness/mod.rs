//! Experiment orchestration: configuration, the simulation sweep, aggregate
//! reports, output files and the command line.

pub mod cli;
pub mod config;
pub mod output;
pub mod report;
pub mod sim;

pub use cli::cli_entry;
pub use config::{ExperimentConfig, ExperimentKind, Setting};
pub use output::{Manifest, OutputDir};
pub use report::{run_bias_report, run_crossover_report, BiasReport, CrossoverReport};
pub use sim::{run_simulation, CellFailure, ExperimentResult, SimRow};
