//! Instance generation, run configuration, execution and reporting.

pub mod config;
pub mod instance;
pub mod metrics;
pub mod report;
pub mod verify;

pub use config::{Mode, RunConfig};
pub use report::{run, run_mode, CriterionResult, SimulationReport};
pub use verify::{verify_all, Verification};
