//! Deterministic discrete-event cluster simulator.
//!
//! [`run`] executes a workload in either mode and returns the event trace
//! together with metrics recomputed from that trace.

mod config;
mod engine;
pub mod generator;
mod metrics;
pub mod records;
mod trace;

pub use config::{FailureSpec, SimConfig, Slowdown};
pub use generator::{generate_workload, GenParams, Template, UnknownTemplate};
pub use metrics::{compute_metrics, JobMetrics, LoadSummary, MetricsReport, StageMetrics};
pub use trace::{Trace, TraceHeader, FORMAT_VERSION};

use thiserror::Error;

use crate::datastore::StoreError;
use crate::execution::ExecError;
use crate::model::{Mode, ModelError, Workload};
use crate::triggers::TriggerError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("invalid workload: {0}")]
    Model(#[from] ModelError),
    #[error("malformed trace: {0}")]
    BadTrace(String),
    #[error("trace is incomplete: {0}")]
    IncompleteTrace(String),
    #[error("simulation stalled with unfinished jobs: {0}")]
    Stuck(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Runs `workload` under `config` and returns the trace and its metrics.
pub fn run(workload: &Workload, config: &SimConfig) -> Result<(Trace, MetricsReport), SimError> {
    let graphs = workload.build()?;
    let events = engine::Engine::new(graphs, config.clone())?.run()?;
    let trace = Trace {
        header: TraceHeader {
            format_version: FORMAT_VERSION,
            mode: config.mode,
            seed: config.seed,
            workload_hash: workload.hash(),
            machines: config.machines,
            granules_per_stage: config.granules,
        },
        events,
    };
    let report = compute_metrics(&trace)?;
    Ok((trace, report))
}

/// [`run`] with the compute-centric baseline forced on.
pub fn run_compute_centric(workload: &Workload, config: &SimConfig) -> Result<(Trace, MetricsReport), SimError> {
    let config = SimConfig {
        mode: Mode::ComputeCentric,
        ..config.clone()
    };
    run(workload, &config)
}
