use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::datastore::MonitorSpec;
use crate::model::{ModelError, Seconds};
use crate::triggers::TriggerSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeType {
    Stateless,
    /// Stateful, commutative and associative (sum, count, min, max, ...).
    StatefulCa,
    StatefulNonCa,
}

/// A key-range segment of an explicit key distribution.
///
/// Records are apportioned to segments by weight; keys and values are drawn
/// uniformly inside each segment's ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeySegment {
    pub keys: [u64; 2],
    pub weight: u64,
    #[serde(default = "default_value_range")]
    pub values: [u32; 2],
}

pub(crate) fn default_value_range() -> [u32; 2] {
    [0, 1024]
}

/// Synthetic description of a stage's output stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DataModelRepr", into = "DataModelRepr")]
pub struct DataModel {
    total_output_bytes: u64,
    key_skew: f64,
    records: u64,
    per_record_bytes: u64,
    segments: Vec<KeySegment>,
    values: [u32; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DataModelRepr {
    bytes: u64,
    records: u64,
    #[serde(default)]
    zipf: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    segments: Vec<KeySegment>,
    #[serde(default = "default_value_range")]
    values: [u32; 2],
}

impl TryFrom<DataModelRepr> for DataModel {
    type Error = ModelError;

    fn try_from(r: DataModelRepr) -> Result<Self, Self::Error> {
        let mut m = DataModel::new(r.bytes, r.records, r.zipf)?;
        m.values = r.values;
        if r.values[0] >= r.values[1] {
            return Err(ModelError::InvalidDataModel("empty value range".into()));
        }
        if !r.segments.is_empty() {
            m = m.with_segments(r.segments)?;
        }
        Ok(m)
    }
}

impl From<DataModel> for DataModelRepr {
    fn from(m: DataModel) -> Self {
        DataModelRepr {
            bytes: m.total_output_bytes,
            records: m.records,
            zipf: m.key_skew,
            segments: m.segments,
            values: m.values,
        }
    }
}

impl DataModel {
    /// `bytes` must split evenly over `records`.
    pub fn new(bytes: u64, records: u64, zipf: f64) -> Result<Self, ModelError> {
        if !(zipf >= 0.0 && zipf.is_finite()) {
            return Err(ModelError::InvalidDataModel(format!(
                "zipf exponent {zipf} must be >= 0"
            )));
        }
        if records == 0 {
            if bytes != 0 {
                return Err(ModelError::InvalidDataModel("bytes without records".into()));
            }
            return Ok(Self {
                total_output_bytes: 0,
                key_skew: zipf,
                records: 0,
                per_record_bytes: 0,
                segments: Vec::new(),
                values: default_value_range(),
            });
        }
        if !bytes.is_multiple_of(records) {
            return Err(ModelError::InvalidDataModel(format!(
                "{bytes} bytes do not divide evenly over {records} records"
            )));
        }
        Ok(Self {
            total_output_bytes: bytes,
            key_skew: zipf,
            records,
            per_record_bytes: bytes / records,
            segments: Vec::new(),
            values: default_value_range(),
        })
    }

    pub fn with_segments(mut self, segments: Vec<KeySegment>) -> Result<Self, ModelError> {
        for s in &segments {
            if s.keys[0] >= s.keys[1] || s.keys[1] > crate::model::KEY_SPACE {
                return Err(ModelError::InvalidDataModel(format!("bad key segment {:?}", s.keys)));
            }
            if s.values[0] >= s.values[1] {
                return Err(ModelError::InvalidDataModel(format!("bad value range {:?}", s.values)));
            }
        }
        if segments.iter().map(|s| s.weight).sum::<u64>() == 0 {
            return Err(ModelError::InvalidDataModel("segment weights sum to zero".into()));
        }
        self.segments = segments;
        Ok(self)
    }

    pub fn with_values(mut self, lo: u32, hi: u32) -> Self {
        assert!(lo < hi);
        self.values = [lo, hi];
        self
    }

    pub fn total_output_bytes(&self) -> u64 {
        self.total_output_bytes
    }

    pub fn key_skew(&self) -> f64 {
        self.key_skew
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn per_record_bytes(&self) -> u64 {
        self.per_record_bytes
    }

    pub fn segments(&self) -> &[KeySegment] {
        &self.segments
    }

    pub fn values(&self) -> [u32; 2] {
        self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">")]
    Gt,
}

impl CmpOp {
    #[inline]
    pub fn holds(self, value: i64, threshold: i64) -> bool {
        match self {
            CmpOp::Lt => value < threshold,
            CmpOp::Eq => value == threshold,
            CmpOp::Gt => value > threshold,
        }
    }
}

/// Action chosen for a ready granule in answer to a status query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusDecision {
    NoNewAction,
    Ignore,
    Replace(String),
}

/// Declarative stand-in for a client-side decision callback: when the named
/// counter of a ready granule satisfies `op threshold`, answer `decision`.
///
/// `counter_id` may name a custom monitor counter or one of the built-in
/// statistics `bytes` and `kv_pairs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusRule {
    pub counter_id: String,
    pub op: CmpOp,
    pub threshold: i64,
    pub decision: StatusDecision,
}

/// One stage as written in a workload file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    #[serde(rename = "id")]
    pub stage_id: String,
    pub compute_type: ComputeType,
    #[serde(default)]
    pub trigger: TriggerSpec,
    pub output: DataModel,
    #[serde(default)]
    pub monitors: Vec<MonitorSpec>,
    #[serde(default = "default_logic")]
    pub logic_id: String,
    /// Fixed task count used by the compute-centric baseline (and for
    /// root-stage input splits in both modes).
    #[serde(default = "default_partitions")]
    pub partitions: u32,
    /// External input read by a root stage; defaults to its output size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<StatusRule>,
}

fn default_logic() -> String {
    "default".into()
}

fn default_partitions() -> u32 {
    1
}

/// One job as written in a workload file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: String,
    #[serde(default)]
    pub arrival_time_s: Seconds,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub edges: Vec<[String; 2]>,
}

/// Validated DAG of stages.
#[derive(Clone, Debug, PartialEq)]
pub struct JobGraph {
    pub job_id: String,
    pub arrival_time_s: Seconds,
    pub stages: Vec<StageSpec>,
    /// (producer, consumer) stage indices.
    pub edges: Vec<(usize, usize)>,
    producers: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl JobGraph {
    pub fn stage_index(&self, id: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.stage_id == id)
    }

    pub fn producers(&self, stage: usize) -> &[usize] {
        &self.producers[stage]
    }

    pub fn consumers(&self, stage: usize) -> &[usize] {
        &self.consumers[stage]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn roots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.stages.len()).filter(|&s| self.producers[s].is_empty())
    }

    pub fn is_root(&self, stage: usize) -> bool {
        self.producers[stage].is_empty()
    }

    /// Transitive ancestors of `stage` with their distance (1 = parent),
    /// using the shortest path when several exist.
    pub fn ancestors(&self, stage: usize) -> Vec<(usize, u32)> {
        let mut dist: HashMap<usize, u32> = HashMap::new();
        let mut frontier = vec![stage];
        let mut d = 0;
        while !frontier.is_empty() {
            d += 1;
            let mut next = BTreeSet::new();
            for s in frontier {
                for &p in &self.producers[s] {
                    if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(p) {
                        e.insert(d);
                        next.insert(p);
                    }
                }
            }
            frontier = next.into_iter().collect();
        }
        let mut out: Vec<_> = dist.into_iter().collect();
        out.sort_unstable();
        out
    }

    /// Stages other than `stage` that feed one of `stage`'s consumers.
    pub fn siblings(&self, stage: usize) -> Vec<usize> {
        let mut out = BTreeSet::new();
        for &c in &self.consumers[stage] {
            for &p in &self.producers[c] {
                if p != stage {
                    out.insert(p);
                }
            }
        }
        out.into_iter().collect()
    }

    /// Bytes a stage reads: external input for roots, otherwise the declared
    /// output of its producers.
    pub fn expected_input_bytes(&self, stage: usize) -> u64 {
        if self.is_root(stage) {
            let s = &self.stages[stage];
            s.input_bytes.unwrap_or(s.output.total_output_bytes())
        } else {
            self.producers[stage]
                .iter()
                .map(|&p| self.stages[p].output.total_output_bytes())
                .sum()
        }
    }
}

/// Validates a job description and computes its topological order.
pub fn build_job_graph(spec: &JobSpec) -> Result<JobGraph, ModelError> {
    let job = spec.id.clone();
    if spec.stages.is_empty() {
        return Err(ModelError::EmptyJob(job));
    }
    let mut index = HashMap::new();
    for (i, s) in spec.stages.iter().enumerate() {
        if index.insert(s.stage_id.as_str(), i).is_some() {
            return Err(ModelError::DuplicateStage {
                job,
                stage: s.stage_id.clone(),
            });
        }
        s.trigger.validate().map_err(|reason| ModelError::InvalidTrigger {
            job: job.clone(),
            stage: s.stage_id.clone(),
            reason,
        })?;
        if s.partitions == 0 {
            return Err(ModelError::InvalidDataModel(format!(
                "stage {} of job {job} has zero partitions",
                s.stage_id
            )));
        }
    }
    if !(spec.arrival_time_s >= 0.0 && spec.arrival_time_s.is_finite()) {
        return Err(ModelError::InvalidArrival(job));
    }

    let n = spec.stages.len();
    let mut edges = Vec::with_capacity(spec.edges.len());
    let mut producers = vec![Vec::new(); n];
    let mut consumers = vec![Vec::new(); n];
    for [from, to] in &spec.edges {
        let lookup = |name: &String| {
            index
                .get(name.as_str())
                .copied()
                .ok_or_else(|| ModelError::DanglingEdge {
                    job: job.clone(),
                    stage: name.clone(),
                })
        };
        let (a, b) = (lookup(from)?, lookup(to)?);
        if a == b {
            return Err(ModelError::CycleDetected(job));
        }
        if edges.contains(&(a, b)) {
            continue;
        }
        edges.push((a, b));
        producers[b].push(a);
        consumers[a].push(b);
    }
    for v in producers.iter_mut().chain(consumers.iter_mut()) {
        v.sort_unstable();
    }

    // Kahn, lowest index first for a deterministic order.
    let mut indegree: Vec<usize> = producers.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&s| indegree[s] == 0).collect();
    if ready.is_empty() {
        return Err(ModelError::CycleDetected(job));
    }
    let mut topo = Vec::with_capacity(n);
    while let Some(s) = ready.pop_first() {
        topo.push(s);
        for &c in &consumers[s] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if topo.len() != n {
        return Err(ModelError::CycleDetected(job));
    }

    for (s, stage) in spec.stages.iter().enumerate() {
        if let TriggerSpec::Pipelining { .. } = stage.trigger {
            let ok = consumers[s].len() == 1 && spec.stages[consumers[s][0]].compute_type == ComputeType::StatefulCa;
            if !ok {
                return Err(ModelError::IllegalPipeliningTrigger {
                    job,
                    stage: stage.stage_id.clone(),
                });
            }
        }
    }

    Ok(JobGraph {
        job_id: spec.id.clone(),
        arrival_time_s: spec.arrival_time_s,
        stages: spec.stages.clone(),
        edges,
        producers,
        consumers,
        topo,
    })
}
