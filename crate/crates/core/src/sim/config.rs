use serde::{Deserialize, Serialize};

use crate::execution::{DEFAULT_RETRY_LIMIT, DEFAULT_THETA};
use crate::model::{Mode, Seconds, DEFAULT_GRANULES, GB};
use crate::sim::SimError;

/// Slows the first task of a stage down by `factor` once it has run for
/// `after_s` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slowdown {
    pub job: String,
    pub stage: String,
    pub after_s: Seconds,
    pub factor: f64,
}

/// Fails a machine at a fixed time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub machine: u32,
    pub at_s: Seconds,
}

/// Everything that, together with the workload, determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Granules per stage.
    pub granules: u32,
    pub machines: u32,
    pub storage_capacity: u64,
    /// Resource units per machine.
    pub compute_units: f64,
    pub pressure_threshold: f64,
    /// An open materialization larger than this multiple of the stage's
    /// expected bytes per granule stops receiving data.
    pub spread_factor: f64,
    pub retry_limit: u32,
    pub theta: f64,
    pub straggler_check_s: Seconds,
    /// Overrides the record threshold of every streaming trigger.
    pub streaming_x: Option<u64>,
    pub max_input_per_task: Option<u64>,
    pub cc_launch_fraction: f64,
    /// Accepted for completeness; the baseline runs streaming stages with
    /// batch semantics.
    pub cc_streaming_interval_s: Seconds,
    pub ilp_weights: Option<[f64; 3]>,
    /// Seconds one resource unit needs to process one GB.
    pub secs_per_gb_unit: f64,
    /// Bytes per second for remote reads.
    pub shuffle_bandwidth: f64,
    /// Input of root tasks is read in chunks of this size; output is
    /// spilled after each chunk.
    pub spill_chunk_bytes: u64,
    pub root_task_units: f64,
    pub cc_task_units: f64,
    /// Machines with fewer free units defer data-driven subsets.
    pub min_task_units: f64,
    pub max_units_per_task: Option<f64>,
    pub slowdowns: Vec<Slowdown>,
    pub failures: Vec<FailureSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: Mode::DataDriven,
            seed: 0,
            granules: DEFAULT_GRANULES,
            machines: 8,
            storage_capacity: 64 * GB,
            compute_units: 8.0,
            pressure_threshold: 0.75,
            spread_factor: 2.0,
            retry_limit: DEFAULT_RETRY_LIMIT,
            theta: DEFAULT_THETA,
            straggler_check_s: 1.0,
            streaming_x: None,
            max_input_per_task: None,
            cc_launch_fraction: 0.9,
            cc_streaming_interval_s: 60.0,
            ilp_weights: None,
            secs_per_gb_unit: 10.0,
            shuffle_bandwidth: GB as f64,
            spill_chunk_bytes: 64 * 1024 * 1024,
            root_task_units: 1.0,
            cc_task_units: 1.0,
            min_task_units: 0.5,
            max_units_per_task: Some(1.0),
            slowdowns: Vec::new(),
            failures: Vec::new(),
        }
    }
}

/// False for NaN as well as non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::ConfigInvalid(m.to_string()));
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if self.granules == 0 {
            return bad("granules must be positive");
        }
        if self.machines == 0 {
            return bad("machines must be positive");
        }
        if self.storage_capacity == 0 || !positive(self.compute_units) {
            return bad("machine capacities must be positive");
        }
        if !unit(self.pressure_threshold) || !unit(self.theta) || !unit(self.cc_launch_fraction) {
            return bad("pressure_threshold, theta and cc_launch_fraction must lie in (0, 1]");
        }
        if !positive(self.spread_factor) {
            return bad("spread_factor must be positive");
        }
        if self.retry_limit == 0 {
            return bad("retry_limit must be at least 1");
        }
        if !positive(self.straggler_check_s) || !positive(self.cc_streaming_interval_s) {
            return bad("periods must be positive");
        }
        if !positive(self.secs_per_gb_unit) || !positive(self.shuffle_bandwidth) || self.spill_chunk_bytes == 0 {
            return bad("rates and chunk size must be positive");
        }
        if !positive(self.root_task_units) || !positive(self.cc_task_units) || self.min_task_units < 0.0 {
            return bad("task units must be positive");
        }
        if self.root_task_units > self.compute_units || self.cc_task_units > self.compute_units {
            return bad("a task cannot need more units than a machine has");
        }
        if self.max_units_per_task.is_some_and(|u| !positive(u)) {
            return bad("max_units_per_task must be positive");
        }
        if self.max_input_per_task == Some(0) || self.streaming_x == Some(0) {
            return bad("max_input_per_task and streaming_x must be positive");
        }
        for s in &self.slowdowns {
            if !positive(s.factor) || s.after_s < 0.0 {
                return bad("slowdown needs a positive factor and a non-negative delay");
            }
        }
        for f in &self.failures {
            if f.machine >= self.machines || f.at_s < 0.0 {
                return bad("failure names an unknown machine or a negative time");
            }
        }
        Ok(())
    }

    /// Bytes one resource unit processes per second.
    pub fn unit_rate(&self) -> f64 {
        GB as f64 / self.secs_per_gb_unit
    }
}
