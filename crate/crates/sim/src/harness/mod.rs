//! Scenarios, the invariant checker, metrics and experiment runners.

pub mod checker;
pub mod generator;
pub mod metrics;
pub mod runner;
pub mod scenario;
pub mod sweep;

pub use checker::{check_invariants, NotQuiescent, Violation};
pub use generator::{generate_random, GenParams};
pub use metrics::{collect_metrics, MetricsReport, TraceCorrupt};
pub use runner::{run, Checkpoint, RunOutcome};
pub use scenario::{Header, Scenario, ScenarioError};
