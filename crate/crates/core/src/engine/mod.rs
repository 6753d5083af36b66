//! Scenario-driven simulation: the tick loop binding link, pool, forecaster,
//! policy, protocol and grid; Monte Carlo experiments; trace and report
//! export.

pub mod experiment;
pub mod plot;
pub mod scenario;
pub mod trace;
pub mod world;

use thiserror::Error;

pub use experiment::{run_experiment, Aggregate, ExperimentReport, ScenarioReport};
pub use scenario::{Policy, Scenario, Suite};
pub use trace::{replay_metrics, Trace, TraceMetrics};
pub use world::{run_scenario, RunOutput, RunSummary, World};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    /// Rejected before any tick ran.
    #[error("invalid scenario: {0}")]
    Validation(String),
    /// A decision could not be computed at all (not a budget shortfall,
    /// which falls back to minimal states and is logged in the trace).
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("runtime fault: {0}")]
    Runtime(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("io: {0}")]
    Io(String),
}

impl EngineError {
    /// Process exit code of the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Validation(_) | EngineError::Trace(_) => 2,
            EngineError::Infeasible(_) => 3,
            EngineError::Runtime(_) | EngineError::Io(_) => 1,
        }
    }
}
