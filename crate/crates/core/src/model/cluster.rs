use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{MachineId, Seconds};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub machine_id: MachineId,
    pub storage_capacity: u64,
    /// Abstract compute slots.
    pub compute_capacity: f64,
    /// Stored intermediate bytes per job index.
    pub per_job_stored: BTreeMap<u32, u64>,
    pub failed: bool,
}

impl Machine {
    pub fn new(id: u32, storage_capacity: u64, compute_capacity: f64) -> Self {
        Self {
            machine_id: MachineId(id),
            storage_capacity,
            compute_capacity,
            per_job_stored: BTreeMap::new(),
            failed: false,
        }
    }

    pub fn stored_for(&self, job: u32) -> u64 {
        self.per_job_stored.get(&job).copied().unwrap_or(0)
    }

    pub fn total_stored(&self) -> u64 {
        self.per_job_stored.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub machines: Vec<Machine>,
    pub clock: Seconds,
}

impl ClusterState {
    /// `count` identical machines `m0..m{count-1}`.
    pub fn uniform(count: u32, storage_capacity: u64, compute_capacity: f64) -> Self {
        Self {
            machines: (0..count)
                .map(|i| Machine::new(i, storage_capacity, compute_capacity))
                .collect(),
            clock: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.machines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.machines.is_empty()
    }

    pub fn machine(&self, id: MachineId) -> &Machine {
        &self.machines[id.0 as usize]
    }

    pub fn machine_mut(&mut self, id: MachineId) -> &mut Machine {
        &mut self.machines[id.0 as usize]
    }

    pub fn alive(&self) -> impl Iterator<Item = &Machine> {
        self.machines.iter().filter(|m| !m.failed)
    }

    pub fn usage(&self, job: u32, machine: MachineId) -> u64 {
        self.machine(machine).stored_for(job)
    }

    pub fn add_stored(&mut self, job: u32, machine: MachineId, bytes: u64) {
        *self.machine_mut(machine).per_job_stored.entry(job).or_insert(0) += bytes;
    }

    /// Drops every byte stored for `job`, returning the total freed.
    pub fn release_job(&mut self, job: u32) -> u64 {
        self.machines
            .iter_mut()
            .filter_map(|m| m.per_job_stored.remove(&job))
            .sum()
    }
}
