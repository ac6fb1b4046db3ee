//! Metrics recomputed from a trace alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{Aggregate, EventKind, GranuleId, MachineId, Mode, Seconds, StageKey, StatusDecision, TaskId};
use crate::sim::{SimError, Trace, FORMAT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub job: u32,
    pub name: String,
    pub arrival_s: Seconds,
    pub completion_s: Seconds,
    pub jct_s: Seconds,
    /// Share of the job's granules stored on a single machine.
    pub dl_granule_fraction: f64,
    /// Share of the job's granules on machines holding no ancestor-stage data.
    pub ft_granule_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub job: u32,
    pub stage: u32,
    pub name: String,
    /// Tasks launched, speculative copies included.
    pub tasks: u64,
    pub task_inputs: Vec<u64>,
    pub first_launch_s: Option<Seconds>,
    pub completed_s: Option<Seconds>,
    /// From the first task launch to stage completion.
    pub span_s: Option<Seconds>,
    /// Bytes processed by completed and killed tasks.
    pub processed_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
}

/// Cumulative bytes written per machine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub min: u64,
    pub max: u64,
    pub avg: f64,
    pub ideal: f64,
    pub per_machine: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub workload_hash: String,
    pub makespan_s: Seconds,
    pub mean_jct_s: Seconds,
    pub jobs: Vec<JobMetrics>,
    pub stages: Vec<StageMetrics>,
    /// Share of non-root tasks that read no remote bytes.
    pub data_local_task_fraction: f64,
    pub load: LoadSummary,
    /// (time, tasks launched so far).
    pub tasks_launched: Vec<(Seconds, u64)>,
    pub bytes_shuffled: u64,
    pub skipped_granules: u64,
}

impl MetricsReport {
    pub fn job(&self, name: &str) -> Option<&JobMetrics> {
        self.jobs.iter().find(|j| j.name == name)
    }

    pub fn stage(&self, job: &str, stage: &str) -> Option<&StageMetrics> {
        let j = self.job(job)?.job;
        self.stages.iter().find(|s| s.job == j && s.name == stage)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct JobInfo {
    name: String,
    arrival: Seconds,
    done: Option<Seconds>,
    /// Transitive producers of each stage.
    ancestors: Vec<BTreeSet<u32>>,
}

fn ancestors(n: usize, edges: &[(u32, u32)]) -> Vec<BTreeSet<u32>> {
    let mut out = vec![BTreeSet::new(); n];
    for (s, set) in out.iter_mut().enumerate() {
        let mut stack = vec![s as u32];
        while let Some(c) = stack.pop() {
            for &(p, _) in edges.iter().filter(|e| e.1 == c) {
                if set.insert(p) {
                    stack.push(p);
                }
            }
        }
    }
    out
}

/// Walks the trace once and derives the report.
pub fn compute_metrics(trace: &Trace) -> Result<MetricsReport, SimError> {
    let mut machines = trace.header.machines as usize;
    let mut jobs: BTreeMap<u32, JobInfo> = BTreeMap::new();
    let mut placed: BTreeMap<GranuleId, BTreeSet<MachineId>> = BTreeMap::new();
    let mut load: Vec<u64> = vec![0; machines];
    let mut stages: BTreeMap<StageKey, StageMetrics> = BTreeMap::new();
    let mut roots: BTreeSet<StageKey> = BTreeSet::new();
    let mut launched = 0u64;
    let mut series = Vec::new();
    let (mut local_tasks, mut nonroot_tasks, mut shuffled, mut skipped) = (0u64, 0u64, 0u64, 0u64);
    let mut seen_tasks: BTreeSet<TaskId> = BTreeSet::new();

    for e in &trace.events {
        let t = e.timestamp;
        match &e.kind {
            EventKind::SimStarted { machines: m, .. } => {
                machines = *m as usize;
                load.resize(machines, 0);
            }
            EventKind::JobArrived {
                job,
                name,
                stages: names,
                edges,
            } => {
                for (i, s) in names.iter().enumerate() {
                    let key = StageKey::new(*job, i as u32);
                    if !edges.iter().any(|e| e.1 == i as u32) {
                        roots.insert(key);
                    }
                    stages.insert(
                        key,
                        StageMetrics {
                            job: *job,
                            stage: i as u32,
                            name: s.clone(),
                            tasks: 0,
                            task_inputs: Vec::new(),
                            first_launch_s: None,
                            completed_s: None,
                            span_s: None,
                            processed_bytes: 0,
                            aggregate: None,
                        },
                    );
                }
                jobs.insert(
                    *job,
                    JobInfo {
                        name: name.clone(),
                        arrival: t,
                        done: None,
                        ancestors: ancestors(names.len(), edges),
                    },
                );
            }
            EventKind::Stored {
                granule,
                machine,
                bytes,
                ..
            } => {
                placed.entry(*granule).or_default().insert(*machine);
                if let Some(l) = load.get_mut(machine.0 as usize) {
                    *l += bytes;
                }
            }
            EventKind::TaskLaunched { stage, input_bytes, .. } => {
                launched += 1;
                series.push((t, launched));
                if let Some(s) = stages.get_mut(stage) {
                    s.tasks += 1;
                    s.task_inputs.push(*input_bytes);
                    s.first_launch_s.get_or_insert(t);
                }
            }
            EventKind::TaskCompleted {
                task,
                stage,
                processed_bytes,
                remote_bytes,
                aggregate,
                ..
            } => {
                shuffled += remote_bytes;
                if !roots.contains(stage) && seen_tasks.insert(*task) {
                    nonroot_tasks += 1;
                    local_tasks += u64::from(*remote_bytes == 0);
                }
                if let Some(s) = stages.get_mut(stage) {
                    s.processed_bytes += processed_bytes;
                    if let Some(a) = aggregate {
                        s.aggregate = Some(s.aggregate.unwrap_or_default().merge(*a));
                    }
                }
            }
            EventKind::TaskKilled {
                stage, processed_bytes, ..
            } => {
                if let Some(s) = stages.get_mut(stage) {
                    s.processed_bytes += processed_bytes;
                }
            }
            EventKind::StatusDecision {
                decision: StatusDecision::Ignore,
                ..
            } => skipped += 1,
            EventKind::StageCompleted { stage } => {
                if let Some(s) = stages.get_mut(stage) {
                    s.completed_s = Some(t);
                    s.span_s = s.first_launch_s.map(|f| t - f);
                }
            }
            EventKind::JobCompleted { job } => {
                if let Some(j) = jobs.get_mut(job) {
                    j.done = Some(t);
                }
            }
            _ => {}
        }
    }

    let unfinished: Vec<&str> = jobs
        .values()
        .filter(|j| j.done.is_none())
        .map(|j| j.name.as_str())
        .collect();
    if !unfinished.is_empty() {
        return Err(SimError::IncompleteTrace(format!(
            "jobs without completion: {}",
            unfinished.join(", ")
        )));
    }

    // machines holding data of each stage
    let mut stage_machines: BTreeMap<StageKey, BTreeSet<MachineId>> = BTreeMap::new();
    for (g, ms) in &placed {
        stage_machines.entry(g.stage_key()).or_default().extend(ms);
    }
    let mut job_metrics = Vec::new();
    for (&id, j) in &jobs {
        let granules: Vec<(&GranuleId, &BTreeSet<MachineId>)> = placed.iter().filter(|(g, _)| g.job == id).collect();
        let (mut dl, mut ft) = (0usize, 0usize);
        for (g, ms) in &granules {
            dl += usize::from(ms.len() == 1);
            let tolerant = j.ancestors[g.stage as usize].iter().all(|a| {
                stage_machines
                    .get(&StageKey::new(id, *a))
                    .is_none_or(|held| held.is_disjoint(ms))
            });
            ft += usize::from(tolerant);
        }
        let frac = |k: usize| {
            if granules.is_empty() {
                1.0
            } else {
                k as f64 / granules.len() as f64
            }
        };
        let done = j.done.expect("checked above");
        job_metrics.push(JobMetrics {
            job: id,
            name: j.name.clone(),
            arrival_s: j.arrival,
            completion_s: done,
            jct_s: done - j.arrival,
            dl_granule_fraction: frac(dl),
            ft_granule_fraction: frac(ft),
        });
    }

    let makespan = match (
        job_metrics.iter().map(|j| j.arrival_s).reduce(f64::min),
        job_metrics.iter().map(|j| j.completion_s).reduce(f64::max),
    ) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    let mean_jct = if job_metrics.is_empty() {
        0.0
    } else {
        job_metrics.iter().map(|j| j.jct_s).sum::<f64>() / job_metrics.len() as f64
    };
    let total: u64 = load.iter().sum();
    let ideal = if machines == 0 {
        0.0
    } else {
        total as f64 / machines as f64
    };

    Ok(MetricsReport {
        format_version: FORMAT_VERSION,
        mode: trace.header.mode,
        seed: trace.header.seed,
        workload_hash: trace.header.workload_hash.clone(),
        makespan_s: makespan,
        mean_jct_s: mean_jct,
        jobs: job_metrics,
        stages: stages.into_values().collect(),
        data_local_task_fraction: if nonroot_tasks == 0 {
            1.0
        } else {
            local_tasks as f64 / nonroot_tasks as f64
        },
        load: LoadSummary {
            min: load.iter().copied().min().unwrap_or(0),
            max: load.iter().copied().max().unwrap_or(0),
            avg: ideal,
            ideal,
            per_machine: load,
        },
        tasks_launched: series,
        bytes_shuffled: shuffled,
        skipped_granules: skipped,
    })
}
