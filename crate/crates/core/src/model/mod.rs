//! Domain types shared by every module, job-graph validation and key routing.

mod cluster;
mod event;
mod graph;
mod ids;
mod routing;

pub use cluster::{ClusterState, Machine};
pub use event::{Aggregate, CloseReason, Event, EventKind, GranuleStats, Mode};
pub use graph::{
    build_job_graph, CmpOp, ComputeType, DataModel, JobGraph, JobSpec, KeySegment, StageSpec, StatusDecision,
    StatusRule,
};
pub use ids::{GranuleId, MachineId, Seconds, StageKey, TaskId, GB};
pub use routing::{granule_index_for_key, granule_key_range, partition_for_key, DEFAULT_GRANULES, KEY_SPACE};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("job {0} contains a cycle")]
    CycleDetected(String),
    #[error("job {job}: edge names unknown stage {stage}")]
    DanglingEdge { job: String, stage: String },
    #[error("job {job}: stage {stage} uses a pipelining trigger but its consumer is not a single commutative+associative stage")]
    IllegalPipeliningTrigger { job: String, stage: String },
    #[error("job {job}: stage {stage}: {reason}")]
    InvalidTrigger { job: String, stage: String, reason: String },
    #[error("job {job}: duplicate stage id {stage}")]
    DuplicateStage { job: String, stage: String },
    #[error("job {0} has no stages")]
    EmptyJob(String),
    #[error("job {0} has an invalid arrival time")]
    InvalidArrival(String),
    #[error("duplicate job id {0}")]
    DuplicateJob(String),
    #[error("invalid data model: {0}")]
    InvalidDataModel(String),
    #[error("malformed workload: {0}")]
    Json(String),
}

/// A workload file: jobs with arrival times.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub jobs: Vec<JobSpec>,
}

impl Workload {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("workload serializes")
    }

    /// Validates every job; job ids must be unique.
    pub fn build(&self) -> Result<Vec<JobGraph>, ModelError> {
        let mut seen = std::collections::HashSet::new();
        self.jobs
            .iter()
            .map(|j| {
                if !seen.insert(j.id.as_str()) {
                    return Err(ModelError::DuplicateJob(j.id.clone()));
                }
                build_job_graph(j)
            })
            .collect()
    }

    /// SHA-256 of the canonical (compact) JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("workload serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
