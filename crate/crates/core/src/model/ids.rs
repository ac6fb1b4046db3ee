use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of bytes in a (decimal) gigabyte.
pub const GB: u64 = 1_000_000_000;

/// Simulated time in seconds.
pub type Seconds = f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MachineId(pub u32);

impl fmt::Display for MachineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Position of a stage inside a workload: job index and stage index within the job.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StageKey {
    pub job: u32,
    pub stage: u32,
}

impl StageKey {
    pub fn new(job: u32, stage: u32) -> Self {
        Self { job, stage }
    }

    pub fn granule(self, index: u32) -> GranuleId {
        GranuleId {
            job: self.job,
            stage: self.stage,
            index,
        }
    }
}

impl fmt::Display for StageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "j{}/s{}", self.job, self.stage)
    }
}

/// Identifies one granule: the stage that produced it and its index in `0..N`.
///
/// Ordering is lexicographic over (job, stage, index), which is the tie-break
/// order used wherever granules compete.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GranuleId {
    pub job: u32,
    pub stage: u32,
    pub index: u32,
}

impl GranuleId {
    pub fn stage_key(self) -> StageKey {
        StageKey::new(self.job, self.stage)
    }
}

impl fmt::Display for GranuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "j{}/s{}/g{}", self.job, self.stage, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}
