//! Seeded workload generator and the fixed micro-benchmark scenarios.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::MonitorSpec;
use crate::model::{
    granule_key_range, CmpOp, ComputeType, DataModel, JobSpec, KeySegment, Seconds, StageSpec, StatusDecision,
    StatusRule, Workload, GB, KEY_SPACE,
};
use crate::sim::records::stream_rng;
use crate::sim::{SimConfig, Slowdown};
use crate::triggers::TriggerSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    BatchChain,
    SkewedJoin,
    Streaming,
    GraphIterative,
    /// Two-granule stage whose first task slows down mid-run.
    Straggler,
    /// Eight granules, two of which a status rule drops.
    RuntimeChange,
    /// Count/sum aggregation behind a pipelining trigger.
    Pipelining,
    /// Four batch jobs arriving together.
    Contention,
}

impl Template {
    pub const ALL: [Template; 8] = [
        Template::BatchChain,
        Template::SkewedJoin,
        Template::Streaming,
        Template::GraphIterative,
        Template::Straggler,
        Template::RuntimeChange,
        Template::Pipelining,
        Template::Contention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Template::BatchChain => "batch_chain",
            Template::SkewedJoin => "skewed_join",
            Template::Streaming => "streaming",
            Template::GraphIterative => "graph_iterative",
            Template::Straggler => "straggler",
            Template::RuntimeChange => "runtime_change",
            Template::Pipelining => "pipelining",
            Template::Contention => "contention",
        }
    }

    /// Simulator settings the scenario is calibrated for.
    pub fn config(self) -> SimConfig {
        let base = SimConfig::default();
        match self {
            Template::SkewedJoin => SimConfig {
                granules: 16,
                machines: 5,
                max_input_per_task: Some(GB),
                ..base
            },
            Template::Straggler => SimConfig {
                granules: 2,
                machines: 4,
                slowdowns: vec![Slowdown {
                    job: "straggler".into(),
                    stage: "v2".into(),
                    after_s: 4.5,
                    factor: 0.1,
                }],
                ..base
            },
            Template::RuntimeChange => SimConfig {
                granules: 8,
                machines: 4,
                max_input_per_task: Some(GB),
                ..base
            },
            Template::Contention => SimConfig {
                machines: 4,
                storage_capacity: 4 * GB,
                ..base
            },
            _ => base,
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown template {0}")]
pub struct UnknownTemplate(pub String);

impl FromStr for Template {
    type Err = UnknownTemplate;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTemplate(s.to_string()))
    }
}

/// Scale knobs. Templates with a fixed scenario ignore the ones that would
/// change it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub jobs: usize,
    pub mean_interarrival_s: Seconds,
    pub zipf: f64,
    /// Output bytes of a generated stage before per-job jitter.
    pub stage_bytes: u64,
    pub record_bytes: u64,
    pub iters: usize,
    pub partitions: u32,
    pub streaming_x: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            jobs: 10,
            mean_interarrival_s: 20.0,
            zipf: 0.8,
            stage_bytes: GB,
            record_bytes: 100_000,
            iters: 5,
            partitions: 4,
            streaming_x: 100,
        }
    }
}

fn stage(id: &str, compute_type: ComputeType, trigger: TriggerSpec, output: DataModel, partitions: u32) -> StageSpec {
    StageSpec {
        stage_id: id.to_string(),
        compute_type,
        trigger,
        output,
        monitors: Vec::new(),
        logic_id: "default".into(),
        partitions,
        input_bytes: None,
        rules: Vec::new(),
    }
}

fn chain_edges(ids: &[&str]) -> Vec<[String; 2]> {
    ids.windows(2).map(|w| [w[0].to_string(), w[1].to_string()]).collect()
}

fn model(bytes: u64, record_bytes: u64, zipf: f64) -> DataModel {
    let records = (bytes / record_bytes).max(1);
    DataModel::new(records * record_bytes, records, zipf).expect("generator builds valid models")
}

/// One unit-weight segment covering each listed granule.
fn segments(n: u32, granules: &[u32], values: [u32; 2]) -> Vec<KeySegment> {
    granules
        .iter()
        .map(|&g| {
            let r = granule_key_range(g, n, KEY_SPACE);
            KeySegment {
                keys: [r.start, r.end],
                weight: 1,
                values,
            }
        })
        .collect()
}

/// Deterministic workload for `template`; `seed` drives arrivals and sizes.
pub fn generate_workload(template: Template, params: &GenParams, seed: u64) -> Workload {
    let mut rng = stream_rng(seed, u32::MAX, template as u32);
    let p = params;
    let jobs = match template {
        Template::BatchChain | Template::Streaming | Template::GraphIterative => {
            let gap = Exp::new(1.0 / p.mean_interarrival_s.max(f64::MIN_POSITIVE)).expect("positive rate");
            let mut t = 0.0;
            (0..p.jobs.max(1))
                .map(|i| {
                    if i > 0 {
                        t += gap.sample(&mut rng);
                    }
                    let scale = rng.random_range(0.5..1.5);
                    let bytes = (p.stage_bytes as f64 * scale) as u64;
                    let mut job = match template {
                        Template::BatchChain => batch_chain(p, bytes, &format!("batch-{i}")),
                        Template::Streaming => streaming(p, bytes, &format!("stream-{i}")),
                        _ => graph_iterative(p, bytes, &format!("graph-{i}")),
                    };
                    job.arrival_time_s = t;
                    job
                })
                .collect()
        }
        Template::SkewedJoin => vec![skewed_join()],
        Template::Straggler => vec![straggler()],
        Template::RuntimeChange => vec![runtime_change()],
        Template::Pipelining => vec![pipelining(1000)],
        Template::Contention => (0..4).map(|i| contention(&format!("tenant-{i}"), i)).collect(),
    };
    Workload { jobs }
}

fn batch_chain(p: &GenParams, bytes: u64, id: &str) -> JobSpec {
    let ids = ["extract", "transform", "aggregate"];
    JobSpec {
        id: id.into(),
        arrival_time_s: 0.0,
        stages: vec![
            stage(
                ids[0],
                ComputeType::Stateless,
                TriggerSpec::DefaultBatch,
                model(bytes, p.record_bytes, p.zipf),
                p.partitions,
            ),
            stage(
                ids[1],
                ComputeType::Stateless,
                TriggerSpec::DefaultBatch,
                model(bytes / 2, p.record_bytes, p.zipf),
                p.partitions,
            ),
            stage(
                ids[2],
                ComputeType::StatefulCa,
                TriggerSpec::DefaultBatch,
                model(bytes / 10, p.record_bytes, 0.0),
                p.partitions,
            ),
        ],
        edges: chain_edges(&ids),
    }
}

fn streaming(p: &GenParams, bytes: u64, id: &str) -> JobSpec {
    let ids = ["source", "window", "sink"];
    let x = TriggerSpec::DefaultStreaming { x: p.streaming_x };
    JobSpec {
        id: id.into(),
        arrival_time_s: 0.0,
        stages: vec![
            stage(
                ids[0],
                ComputeType::Stateless,
                x.clone(),
                model(bytes, p.record_bytes, p.zipf),
                p.partitions,
            ),
            stage(
                ids[1],
                ComputeType::Stateless,
                x,
                model(bytes / 2, p.record_bytes, p.zipf),
                p.partitions,
            ),
            stage(
                ids[2],
                ComputeType::StatefulCa,
                TriggerSpec::DefaultBatch,
                model(bytes / 10, p.record_bytes, 0.0),
                p.partitions,
            ),
        ],
        edges: chain_edges(&ids),
    }
}

fn graph_iterative(p: &GenParams, bytes: u64, id: &str) -> JobSpec {
    let n = p.iters.max(2);
    let names: Vec<String> = (0..n).map(|i| format!("iter{i}")).collect();
    let ids: Vec<&str> = names.iter().map(String::as_str).collect();
    let stages = (0..n)
        .map(|i| {
            let ct = if i == 0 {
                ComputeType::Stateless
            } else {
                ComputeType::StatefulCa
            };
            let trigger = if i + 1 < n {
                TriggerSpec::Pipelining {
                    x: p.streaming_x.max(1),
                }
            } else {
                TriggerSpec::DefaultBatch
            };
            stage(ids[i], ct, trigger, model(bytes, p.record_bytes, p.zipf), p.partitions)
        })
        .collect();
    JobSpec {
        id: id.into(),
        arrival_time_s: 0.0,
        stages,
        edges: chain_edges(&ids),
    }
}

/// v1 writes 5 GB into ten key segments of 1000 records each: two in the
/// lower half of the key space and eight in the upper half. Two hash
/// partitions therefore receive 1 GB and 4 GB, while 16 granules hold ten
/// 0.5 GB pieces.
pub fn skewed_join() -> JobSpec {
    let out = DataModel::new(5 * GB, 10_000, 0.0)
        .unwrap()
        .with_segments(segments(16, &[0, 1, 8, 9, 10, 11, 12, 13, 14, 15], [0, 1024]))
        .unwrap();
    JobSpec {
        id: "skewed_join".into(),
        arrival_time_s: 0.0,
        stages: vec![
            stage("v1", ComputeType::Stateless, TriggerSpec::DefaultBatch, out, 5),
            stage(
                "v2",
                ComputeType::Stateless,
                TriggerSpec::DefaultBatch,
                model(GB / 10, 100_000, 0.0),
                2,
            ),
        ],
        edges: chain_edges(&["v1", "v2"]),
    }
}

/// v1 writes 1 GB into two granules; v2 is the stage that straggles.
pub fn straggler() -> JobSpec {
    let out = DataModel::new(GB, 10_000, 0.0)
        .unwrap()
        .with_segments(segments(2, &[0, 1], [0, 1024]))
        .unwrap();
    JobSpec {
        id: "straggler".into(),
        arrival_time_s: 0.0,
        stages: vec![
            stage("v1", ComputeType::Stateless, TriggerSpec::DefaultBatch, out, 2),
            stage(
                "v2",
                ComputeType::Stateless,
                TriggerSpec::DefaultBatch,
                model(GB / 100, 100_000, 0.0),
                1,
            ),
        ],
        edges: chain_edges(&["v1", "v2"]),
    }
}

/// Eight 1 GB granules; two carry only values below 100, which a monitor
/// counts and a rule on v3 answers with `ignore`.
pub fn runtime_change() -> JobSpec {
    let mut segs = segments(8, &[0, 1, 2, 3, 4, 5, 6, 7], [100, 1024]);
    for &rare in &[2usize, 5] {
        segs[rare].values = [0, 100];
    }
    let out = DataModel::new(8 * GB, 8_000, 0.0).unwrap().with_segments(segs).unwrap();
    let mut v2 = stage("v2", ComputeType::Stateless, TriggerSpec::DefaultBatch, out, 4);
    v2.monitors = vec![MonitorSpec::ValueThreshold {
        counter_id: "rare".into(),
        op: CmpOp::Lt,
        threshold: 100,
    }];
    let mut v3 = stage(
        "v3",
        ComputeType::Stateless,
        TriggerSpec::DefaultBatch,
        model(GB / 10, 100_000, 0.0),
        4,
    );
    v3.rules = vec![StatusRule {
        counter_id: "rare".into(),
        op: CmpOp::Gt,
        threshold: 0,
        decision: StatusDecision::Ignore,
    }];
    JobSpec {
        id: "runtime_change".into(),
        arrival_time_s: 0.0,
        stages: vec![
            stage(
                "v1",
                ComputeType::Stateless,
                TriggerSpec::DefaultBatch,
                model(GB, 10_000, 0.0),
                4,
            ),
            v2,
            v3,
        ],
        edges: chain_edges(&["v1", "v2", "v3"]),
    }
}

/// 200 000 records feeding a count/sum; `x == 0` selects a batch trigger.
pub fn pipelining(x: u64) -> JobSpec {
    let trigger = if x == 0 {
        TriggerSpec::DefaultBatch
    } else {
        TriggerSpec::Pipelining { x }
    };
    JobSpec {
        id: "pipelining".into(),
        arrival_time_s: 0.0,
        stages: vec![
            stage("produce", ComputeType::Stateless, trigger, model(GB, 5_000, 0.0), 4),
            stage(
                "aggregate",
                ComputeType::StatefulCa,
                TriggerSpec::DefaultBatch,
                model(1_000_000, 1_000, 0.0),
                4,
            ),
        ],
        edges: chain_edges(&["produce", "aggregate"]),
    }
}

fn contention(id: &str, i: u64) -> JobSpec {
    let p = GenParams {
        zipf: 0.5 + 0.2 * i as f64,
        stage_bytes: 2 * GB,
        ..GenParams::default()
    };
    batch_chain(&p, p.stage_bytes, id)
}
