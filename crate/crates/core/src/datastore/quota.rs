use std::collections::BTreeMap;

use crate::datastore::StoreError;
use crate::model::{ClusterState, MachineId};

/// Default fraction of a quota above which a machine counts as pressured.
pub const PRESSURE_THRESHOLD: f64 = 0.75;

/// Per-job, per-machine storage quotas.
#[derive(Clone, Debug, PartialEq)]
pub struct QuotaTable {
    pub per_job_per_machine_quota: BTreeMap<u32, u64>,
    pub pressure_threshold: f64,
}

impl QuotaTable {
    pub fn quota(&self, job: u32) -> u64 {
        self.per_job_per_machine_quota.get(&job).copied().unwrap_or(0)
    }

    /// Job usage on `machine` is strictly below the pressure threshold.
    pub fn is_light(&self, cluster: &ClusterState, job: u32, machine: MachineId) -> bool {
        (cluster.usage(job, machine) as f64) < self.pressure_threshold * self.quota(job) as f64
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.pressure_threshold = threshold;
        self
    }
}

/// Equal share of per-machine storage capacity among the runnable jobs.
///
/// Capacity is that of the smallest live machine, so the quotas of all jobs
/// sum to at most any machine's capacity.
pub fn assign_quota(jobs: &[u32], cluster: &ClusterState) -> Result<QuotaTable, StoreError> {
    let capacity = cluster
        .alive()
        .map(|m| m.storage_capacity)
        .min()
        .filter(|&c| c > 0)
        .ok_or(StoreError::NoMachines)?;
    let share = if jobs.is_empty() {
        0
    } else {
        capacity / jobs.len() as u64
    };
    Ok(QuotaTable {
        per_job_per_machine_quota: jobs.iter().map(|&j| (j, share)).collect(),
        pressure_threshold: PRESSURE_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GB;

    #[test]
    fn single_tenant_gets_everything() {
        let c = ClusterState::uniform(4, 10 * GB, 8.0);
        let q = assign_quota(&[0], &c).unwrap();
        assert_eq!(q.quota(0), 10 * GB);
    }

    #[test]
    fn four_jobs_share_equally() {
        let c = ClusterState::uniform(4, 10 * GB, 8.0);
        let q = assign_quota(&[0, 1, 2, 3], &c).unwrap();
        for j in 0..4 {
            assert_eq!(q.quota(j), 2_500_000_000);
        }
    }

    #[test]
    fn three_jobs_never_exceed_capacity() {
        let c = ClusterState::uniform(4, 10 * GB, 8.0);
        let q = assign_quota(&[0, 1, 2], &c).unwrap();
        let sum: u64 = q.per_job_per_machine_quota.values().sum();
        assert!(sum <= 10 * GB);
        assert_eq!(q.quota(1), 10 * GB / 3);
    }

    #[test]
    fn no_machines() {
        let c = ClusterState::uniform(0, 10 * GB, 8.0);
        assert_eq!(assign_quota(&[0], &c), Err(StoreError::NoMachines));
    }
}
