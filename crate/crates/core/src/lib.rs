//! Simulator and controller for adaptive speculative decoding on
//! mixture-of-experts models.
//!
//! Speculation utility is the effective token rate divided by the cost of a
//! speculative iteration relative to a plain one. Utility above 1 means
//! speculation pays off, and a run's utility equals its TPOT speedup. The
//! [`controller`] measures utility online and picks the speculation length
//! `k` for each request; the rest of the crate simulates the MoE cost of a
//! decode step, the drafter's acceptance behaviour, and whole scenarios.

pub mod analyzer;
pub mod controller;
pub mod cost_model;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod report;
pub mod scenario;
pub mod trace;
pub mod workload;

pub use analyzer::{IterationRecord, PhaseTag, UtilityAnalyzer, UtilitySnapshot};
pub use controller::{Controller, ControllerConfig, ControllerPhase, Trial};
pub use cost_model::{CostBreakdown, CostModel, DraftCostModel, ExpertConfig, FixedCostModel, MoeCostModel};
pub use engine::{CellResult, Policy, RequestMetrics, ScenarioReport, SimOptions};
pub use error::{Error, Result};
pub use fixtures::Task;
pub use scenario::ScenarioConfig;
pub use trace::AcceptanceTrace;
pub use workload::{AcceptancePhase, RequestStream, StreamBudget, WorkloadProfile};
