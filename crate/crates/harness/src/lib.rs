//! Experiment harness: configuration, the opcode set shipped with the CLI,
//! the run driver, grain sweeps and a sequential oracle.

pub mod bench;
pub mod config;
pub mod ops;
pub mod oracle;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
pub use report::RunReport;
pub use run::{run_experiment, RunError, RunOutcome};
