use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{GranuleId, MachineId, Seconds, StageKey, StatusDecision, TaskId};

/// Built-in per-granule statistics plus custom monitor counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GranuleStats {
    pub bytes: u64,
    pub kv_pairs: u64,
    /// Exponentially weighted bytes per simulated second.
    pub growth_rate: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub custom_counters: BTreeMap<String, i64>,
}

impl GranuleStats {
    /// Resolves a counter name against built-ins first, then custom counters.
    pub fn counter(&self, id: &str) -> i64 {
        match id {
            "bytes" => self.bytes as i64,
            "kv_pairs" => self.kv_pairs as i64,
            _ => self.custom_counters.get(id).copied().unwrap_or(0),
        }
    }
}

/// Partial result of a commutative+associative fold: record count and value sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: u64,
    pub sum: u64,
}

impl Aggregate {
    pub fn merge(self, other: Aggregate) -> Aggregate {
        Aggregate {
            count: self.count + other.count,
            sum: self.sum + other.sum,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    /// The materialization outgrew the single-granule spread threshold.
    Spread,
    /// The machine crossed the job's quota pressure threshold.
    Pressure,
    /// The next record would have exceeded the hard quota.
    Quota,
    /// The machine failed.
    Failure,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    DataDriven,
    ComputeCentric,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::DataDriven => "data_driven",
            Mode::ComputeCentric => "compute_centric",
        }
    }
}

/// Everything that can appear in a simulation trace.
///
/// The first six variants are the data/compute protocol messages; the rest
/// record simulator bookkeeping needed to recompute metrics from a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    DataSpill {
        stage: StageKey,
        machine: MachineId,
        records: u64,
        bytes: u64,
    },
    DataReady {
        granule: GranuleId,
        consumers: Vec<StageKey>,
        machines: Vec<MachineId>,
        /// Records handed to consumers by this event (0 for an empty granule).
        records: u64,
        stats: GranuleStats,
    },
    DataGenerated {
        stage: StageKey,
    },
    DataReadyAll {
        stage: StageKey,
    },
    StatusQuery {
        granule: GranuleId,
        consumer: StageKey,
        stats: GranuleStats,
    },
    StatusDecision {
        granule: GranuleId,
        consumer: StageKey,
        decision: StatusDecision,
    },

    SimStarted {
        mode: Mode,
        machines: u32,
        granules_per_stage: u32,
        storage_capacity: u64,
    },
    JobArrived {
        job: u32,
        name: String,
        stages: Vec<String>,
        edges: Vec<(u32, u32)>,
    },
    QuotaAssigned {
        job: u32,
        bytes: u64,
    },
    PlacementPlanned {
        stage: StageKey,
        machines: Vec<MachineId>,
    },
    Stored {
        granule: GranuleId,
        machine: MachineId,
        bytes: u64,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        writeback: bool,
    },
    GranuleClosed {
        granule: GranuleId,
        machine: MachineId,
        reason: CloseReason,
    },
    /// The granule accepts data again through a new materialization on
    /// `machine`; closed materializations stay closed.
    GranuleReopened {
        granule: GranuleId,
        machine: MachineId,
    },
    SubsetDeferred {
        stage: StageKey,
        granules: Vec<GranuleId>,
    },
    TaskLaunched {
        task: TaskId,
        stage: StageKey,
        machine: MachineId,
        resources: f64,
        input_bytes: u64,
        remote_bytes: u64,
        granules: Vec<GranuleId>,
        logic_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        speculative_of: Option<TaskId>,
    },
    TaskCompleted {
        task: TaskId,
        stage: StageKey,
        machine: MachineId,
        processed_bytes: u64,
        /// Input bytes read from other machines.
        remote_bytes: u64,
        granules: Vec<GranuleId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aggregate: Option<Aggregate>,
        /// False for intermediate pipelined rounds whose result was written back.
        final_round: bool,
    },
    TaskKilled {
        task: TaskId,
        stage: StageKey,
        processed_bytes: u64,
        /// Granules finished before the kill; their results are kept.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        granules: Vec<GranuleId>,
    },
    StragglerSplit {
        task: TaskId,
        speed_ratio: f64,
        kept: Vec<GranuleId>,
        reassigned: Vec<GranuleId>,
    },
    StageCompleted {
        stage: StageKey,
    },
    JobCompleted {
        job: u32,
    },
    MachineFailed {
        machine: MachineId,
    },
    DataLost {
        granule: GranuleId,
        machine: MachineId,
        bytes: u64,
    },
    StageReexecuted {
        stage: StageKey,
        bytes: u64,
    },
}

/// One trace entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(rename = "t")]
    pub timestamp: Seconds,
    #[serde(flatten)]
    pub kind: EventKind,
}
