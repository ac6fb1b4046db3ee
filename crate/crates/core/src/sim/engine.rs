//! The discrete-event loop shared by both execution modes.
//!
//! Data-driven mode wires the data store, the stage masters and the
//! execution service together. The compute-centric baseline runs a fixed
//! number of tasks per stage, keeps output at the producers and launches
//! consumers once most upstream tasks are done.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use crate::datastore::{assign_quota, DataStore, QuotaTable, Record, StageContext, StoreConfig};
use crate::execution::{
    apply_status_decision, evaluate_rules, schedule_iteration, split_straggler, AllocParams, ReadyEntry, ReadyPool,
    ResourceView,
};
use crate::model::{
    granule_index_for_key, partition_for_key, Aggregate, ClusterState, ComputeType, Event, EventKind, GranuleId,
    JobGraph, MachineId, Mode, Seconds, StageKey, StatusDecision, TaskId,
};
use crate::sim::records::generate_records;
use crate::sim::{SimConfig, SimError};
use crate::triggers::{self, StageMaster, TriggerSpec, Unconsumed};

const EPS: f64 = 1e-9;

#[derive(Debug)]
enum Ev {
    Arrival(usize),
    Step { task: TaskId, version: u64 },
    Slow { task: TaskId, factor: f64 },
    Check,
    Fail(u32),
}

struct Pending {
    t: Seconds,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // reversed: the heap pops the earliest event, ties in insertion order
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

fn merge(a: &mut Unconsumed, b: &Unconsumed) {
    a.records += b.records;
    a.bytes += b.bytes;
    a.agg = a.agg.merge(b.agg);
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Phase {
    Fetch,
    Compute,
    CcWait,
}

#[derive(Clone, Debug)]
struct Item {
    granule: Option<GranuleId>,
    bytes: u64,
    fetch_secs: f64,
    fetched: bool,
    remote: u64,
    /// Raw input bytes this item contributes to the stage's output progress.
    credit: u64,
    payload: Unconsumed,
    /// Consumptions to release when the item is done.
    owed: u32,
    final_round: bool,
}

impl Item {
    fn plain(bytes: u64) -> Self {
        Self {
            granule: None,
            bytes,
            fetch_secs: 0.0,
            fetched: true,
            remote: 0,
            credit: bytes,
            payload: Unconsumed::default(),
            owed: 0,
            final_round: true,
        }
    }
}

#[derive(Clone, Debug)]
struct CcFetch {
    fetch_t: Seconds,
    waiting: usize,
    partition: u32,
}

#[derive(Clone, Debug)]
enum TaskKind {
    Root,
    Consumer,
    Recovery(Vec<(GranuleId, u64)>),
    Cc {
        logical: usize,
        clone_of: Option<TaskId>,
        items_done: usize,
        fetch: Option<CcFetch>,
    },
}

#[derive(Clone, Debug)]
struct TaskRt {
    job: usize,
    stage: usize,
    machine: MachineId,
    resources: f64,
    speed: f64,
    items: VecDeque<Item>,
    phase: Phase,
    remaining: f64,
    since: Seconds,
    version: u64,
    processed: u64,
    remote: u64,
    granules_done: Vec<GranuleId>,
    agg: Aggregate,
    any_final: bool,
    logic: String,
    pipelined: bool,
    kind: TaskKind,
}

/// Data handed to a consumer pool but not yet given to a task.
#[derive(Clone, Debug, Default)]
struct Carried {
    /// Records already taken from the granule (returned by a split or a kill).
    held: Unconsumed,
    owed: u32,
    /// Snapshot of a pending ready event whose records are still in the granule.
    awaiting: Option<Unconsumed>,
    /// `held` came from an intermediate pipelined round.
    held_partial: bool,
}

#[derive(Clone, Debug, Default)]
struct CcLogical {
    input: u64,
    partition: u32,
    copies: Vec<TaskId>,
    done: bool,
    finish_t: Seconds,
    credited_items: usize,
    /// Output bytes by (consumer stage, consumer partition, machine).
    out: BTreeMap<(usize, u32, MachineId), u64>,
}

struct StageRt {
    key: StageKey,
    records: Vec<Record>,
    emitted: usize,
    credited: u64,
    expected: u64,
    master: Option<StageMaster>,
    pool: ReadyPool,
    carried: BTreeMap<GranuleId, Carried>,
    ready_all: BTreeSet<usize>,
    running: BTreeSet<TaskId>,
    pending_root: VecDeque<u64>,
    pending_recovery: VecDeque<Vec<(GranuleId, u64)>>,
    complete: bool,
    last_machine: MachineId,
    cc_logical: Vec<CcLogical>,
    cc_pending: VecDeque<usize>,
    cc_created: bool,
    cc_done: usize,
    cc_part_agg: BTreeMap<u32, Aggregate>,
}

struct JobRt {
    graph: JobGraph,
    arrived: bool,
    complete: bool,
    stages: Vec<StageRt>,
}

pub(crate) struct Engine {
    cfg: SimConfig,
    now: Seconds,
    seq: u64,
    heap: BinaryHeap<Pending>,
    events: Vec<Event>,
    queue: VecDeque<EventKind>,
    cluster: ClusterState,
    store: DataStore,
    quota: QuotaTable,
    jobs: Vec<JobRt>,
    tasks: BTreeMap<TaskId, TaskRt>,
    next_task: u64,
    used: Vec<f64>,
    job_used: Vec<Vec<f64>>,
    active: Vec<usize>,
    check_pending: bool,
    dirty: bool,
    slowdowns: Vec<(usize, usize, Seconds, f64, bool)>,
    recovering: BTreeSet<GranuleId>,
}

impl Engine {
    pub(crate) fn new(graphs: Vec<JobGraph>, cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let cluster = ClusterState::uniform(cfg.machines, cfg.storage_capacity, cfg.compute_units);
        let store = DataStore::new(StoreConfig {
            granules: cfg.granules,
            pressure_threshold: cfg.pressure_threshold,
            spread_factor: cfg.spread_factor,
            ..Default::default()
        });
        let quota = assign_quota(&[], &cluster).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let mut slowdowns = Vec::new();
        for s in &cfg.slowdowns {
            let j = graphs
                .iter()
                .position(|g| g.job_id == s.job)
                .ok_or_else(|| SimError::ConfigInvalid(format!("slowdown names unknown job {}", s.job)))?;
            let st = graphs[j]
                .stage_index(&s.stage)
                .ok_or_else(|| SimError::ConfigInvalid(format!("slowdown names unknown stage {}", s.stage)))?;
            slowdowns.push((j, st, s.after_s, s.factor, false));
        }
        let jobs = graphs
            .into_iter()
            .enumerate()
            .map(|(j, graph)| {
                let stages = (0..graph.stages.len())
                    .map(|s| {
                        let key = StageKey::new(j as u32, s as u32);
                        let mut pool = ReadyPool::new(key);
                        pool.max_input_per_task = cfg.max_input_per_task;
                        StageRt {
                            key,
                            records: Vec::new(),
                            emitted: 0,
                            credited: 0,
                            expected: graph.expected_input_bytes(s),
                            master: None,
                            pool,
                            carried: BTreeMap::new(),
                            ready_all: BTreeSet::new(),
                            running: BTreeSet::new(),
                            pending_root: VecDeque::new(),
                            pending_recovery: VecDeque::new(),
                            complete: false,
                            last_machine: MachineId(0),
                            cc_logical: Vec::new(),
                            cc_pending: VecDeque::new(),
                            cc_created: false,
                            cc_done: 0,
                            cc_part_agg: BTreeMap::new(),
                        }
                    })
                    .collect();
                JobRt {
                    graph,
                    arrived: false,
                    complete: false,
                    stages,
                }
            })
            .collect::<Vec<_>>();
        let m = cfg.machines as usize;
        let njobs = jobs.len();
        Ok(Self {
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            events: Vec::new(),
            queue: VecDeque::new(),
            cluster,
            store,
            quota,
            jobs,
            tasks: BTreeMap::new(),
            next_task: 0,
            used: vec![0.0; m],
            job_used: vec![vec![0.0; m]; njobs],
            active: Vec::new(),
            check_pending: false,
            dirty: false,
            slowdowns,
            recovering: BTreeSet::new(),
            cfg,
        })
    }

    fn dd(&self) -> bool {
        self.cfg.mode == Mode::DataDriven
    }

    fn push(&mut self, t: Seconds, ev: Ev) {
        self.seq += 1;
        self.heap.push(Pending { t, seq: self.seq, ev });
    }

    fn emit(&mut self, kind: EventKind) {
        let seq = self.events.len() as u64;
        self.events.push(Event {
            seq,
            timestamp: self.now,
            kind,
        });
    }

    pub(crate) fn run(mut self) -> Result<Vec<Event>, SimError> {
        if self.jobs.is_empty() {
            return Ok(Vec::new());
        }
        self.emit(EventKind::SimStarted {
            mode: self.cfg.mode,
            machines: self.cfg.machines,
            granules_per_stage: self.cfg.granules,
            storage_capacity: self.cfg.storage_capacity,
        });
        for j in 0..self.jobs.len() {
            let t = self.jobs[j].graph.arrival_time_s;
            self.push(t, Ev::Arrival(j));
        }
        for f in self.cfg.failures.clone() {
            self.push(f.at_s, Ev::Fail(f.machine));
        }
        while let Some(p) = self.heap.pop() {
            self.now = p.t;
            self.handle(p.ev)?;
            self.drain()?;
            if self.dirty {
                self.dirty = false;
                self.schedule()?;
                self.drain()?;
            }
        }
        let stuck: Vec<String> = self
            .jobs
            .iter()
            .filter(|j| !j.complete)
            .map(|j| j.graph.job_id.clone())
            .collect();
        if !stuck.is_empty() {
            return Err(SimError::Stuck(stuck.join(", ")));
        }
        Ok(self.events)
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Arrival(j) => self.arrive(j),
            Ev::Step { task, version } => {
                let Some(t) = self.tasks.get(&task) else { return Ok(()) };
                if t.version != version {
                    return Ok(());
                }
                match t.phase {
                    Phase::Fetch => {
                        self.tasks.get_mut(&task).expect("live").items[0].fetched = true;
                        self.begin_compute(task);
                        Ok(())
                    }
                    Phase::Compute => self.finish_item(task),
                    Phase::CcWait => {
                        self.cc_fetch_done(task);
                        Ok(())
                    }
                }
            }
            Ev::Slow { task, factor } => {
                if self.tasks.contains_key(&task) {
                    self.set_speed(task, factor);
                }
                Ok(())
            }
            Ev::Check => {
                self.check_pending = false;
                if self.dd() {
                    self.dd_check_stragglers();
                } else {
                    self.cc_check_stragglers();
                }
                if !self.tasks.is_empty() {
                    self.schedule_check();
                }
                Ok(())
            }
            Ev::Fail(m) => self.fail_machine(MachineId(m)),
        }
    }

    /// Emits queued events in order, reacting to the protocol messages.
    fn drain(&mut self) -> Result<(), SimError> {
        while let Some(kind) = self.queue.pop_front() {
            self.emit(kind.clone());
            match kind {
                EventKind::DataReady {
                    granule,
                    consumers,
                    records,
                    stats,
                    ..
                } => self.on_data_ready(granule, &consumers, records, &stats)?,
                EventKind::DataReadyAll { stage } => self.on_ready_all(stage)?,
                _ => {}
            }
        }
        Ok(())
    }

    // ---- arrivals, quotas, completion -------------------------------------------------

    fn arrive(&mut self, j: usize) -> Result<(), SimError> {
        let seed = self.cfg.seed;
        let job = &mut self.jobs[j];
        job.arrived = true;
        let g = &job.graph;
        let kind = EventKind::JobArrived {
            job: j as u32,
            name: g.job_id.clone(),
            stages: g.stages.iter().map(|s| s.stage_id.clone()).collect(),
            edges: g.edges.iter().map(|&(a, b)| (a as u32, b as u32)).collect(),
        };
        for (s, st) in job.stages.iter_mut().enumerate() {
            st.records = generate_records(&g.stages[s].output, seed, j as u32, s as u32);
        }
        self.active.push(j);
        self.emit(kind);
        let n = self.jobs[j].graph.stages.len();
        if self.dd() {
            for s in 0..n {
                let g = &self.jobs[j].graph;
                let key = StageKey::new(j as u32, s as u32);
                let ctx = StageContext {
                    stage: key,
                    siblings: g
                        .siblings(s)
                        .into_iter()
                        .map(|x| StageKey::new(j as u32, x as u32))
                        .collect(),
                    ancestors: g
                        .ancestors(s)
                        .into_iter()
                        .map(|(x, d)| (StageKey::new(j as u32, x as u32), d))
                        .collect(),
                };
                let spec = &g.stages[s];
                self.store
                    .register_stage(ctx, spec.output.total_output_bytes(), spec.monitors.clone());
                let consumers: Vec<StageKey> = g
                    .consumers(s)
                    .iter()
                    .map(|&c| StageKey::new(j as u32, c as u32))
                    .collect();
                if !consumers.is_empty() {
                    let mut trigger = spec.trigger.clone();
                    if let (TriggerSpec::DefaultStreaming { x }, Some(ox)) = (&mut trigger, self.cfg.streaming_x) {
                        *x = ox;
                    }
                    self.jobs[j].stages[s].master = Some(StageMaster::new(key, trigger, consumers));
                }
            }
            self.recompute_quota();
        }
        for s in 0..n {
            let g = &self.jobs[j].graph;
            if !g.is_root(s) {
                continue;
            }
            let spec = &g.stages[s];
            let input = g.expected_input_bytes(s);
            let p = spec.partitions as u64;
            let shares: Vec<u64> = (0..p).map(|i| input / p + u64::from(i < input % p)).collect();
            let st = &mut self.jobs[j].stages[s];
            if self.cfg.mode == Mode::DataDriven {
                st.pending_root.extend(shares);
            } else {
                st.cc_logical = shares
                    .into_iter()
                    .enumerate()
                    .map(|(i, b)| CcLogical {
                        input: b,
                        partition: i as u32,
                        ..Default::default()
                    })
                    .collect();
                st.cc_pending = (0..st.cc_logical.len()).collect();
                st.cc_created = true;
            }
        }
        self.dirty = true;
        Ok(())
    }

    fn recompute_quota(&mut self) {
        let ids: Vec<u32> = self.active.iter().map(|&j| j as u32).collect();
        let Ok(q) = assign_quota(&ids, &self.cluster) else {
            return;
        };
        let q = q.with_threshold(self.cfg.pressure_threshold);
        for &j in &ids {
            if q.quota(j) != self.quota.quota(j) || !self.quota.per_job_per_machine_quota.contains_key(&j) {
                self.queue.push_back(EventKind::QuotaAssigned {
                    job: j,
                    bytes: q.quota(j),
                });
            }
        }
        self.quota = q;
    }

    fn check_stage(&mut self, j: usize, s: usize) -> Result<(), SimError> {
        let dd = self.dd();
        let job = &self.jobs[j];
        let st = &job.stages[s];
        if st.complete {
            return Ok(());
        }
        let done = if dd {
            let producers_done = job.graph.producers(s).iter().all(|p| st.ready_all.contains(p));
            producers_done
                && st.pending_root.is_empty()
                && st.pool.is_empty()
                && st.carried.is_empty()
                && st.running.is_empty()
                && (!job.graph.is_root(s) || st.credited > 0 || st.expected == 0)
        } else {
            st.cc_created && st.cc_done == st.cc_logical.len()
        };
        if !done {
            return Ok(());
        }
        self.jobs[j].stages[s].complete = true;
        let machine = self.jobs[j].stages[s].last_machine;
        let last = self.jobs[j].stages[s].cc_logical.len().checked_sub(1);
        self.flush(j, s, machine, last)?;
        let key = self.jobs[j].stages[s].key;
        if dd && self.jobs[j].stages[s].master.is_some() {
            self.queue.push_back(EventKind::DataGenerated { stage: key });
            let granules = self.store.catalog.stage_granules_mut(key);
            let ev = self.jobs[j].stages[s]
                .master
                .as_mut()
                .expect("master")
                .on_data_generated(granules)?;
            self.queue.extend(ev);
        }
        self.queue.push_back(EventKind::StageCompleted { stage: key });
        if self.jobs[j].stages.iter().all(|s| s.complete) {
            self.jobs[j].complete = true;
            self.active.retain(|&x| x != j);
            self.queue.push_back(EventKind::JobCompleted { job: j as u32 });
            if dd {
                self.store.release_job(j as u32, &mut self.cluster);
                self.recompute_quota();
            }
            self.dirty = true;
        }
        Ok(())
    }

    // ---- output emission ---------------------------------------------------------------

    fn credit(
        &mut self,
        j: usize,
        s: usize,
        bytes: u64,
        machine: MachineId,
        logical: Option<usize>,
    ) -> Result<(), SimError> {
        let st = &mut self.jobs[j].stages[s];
        st.credited += bytes;
        if st.expected == 0 {
            return Ok(());
        }
        let target = (st.records.len() as u128 * st.credited.min(st.expected) as u128 / st.expected as u128) as usize;
        if target > st.emitted {
            let recs = st.records[st.emitted..target].to_vec();
            st.emitted = target;
            self.spill(j, s, machine, &recs, logical)?;
        }
        Ok(())
    }

    fn flush(&mut self, j: usize, s: usize, machine: MachineId, logical: Option<usize>) -> Result<(), SimError> {
        let st = &mut self.jobs[j].stages[s];
        if st.emitted < st.records.len() {
            let recs = st.records[st.emitted..].to_vec();
            st.emitted = st.records.len();
            self.spill(j, s, machine, &recs, logical)?;
        }
        Ok(())
    }

    fn spill(
        &mut self,
        j: usize,
        s: usize,
        machine: MachineId,
        recs: &[Record],
        logical: Option<usize>,
    ) -> Result<(), SimError> {
        if recs.is_empty() {
            return Ok(());
        }
        let key = self.jobs[j].stages[s].key;
        let bytes: u64 = recs.iter().map(|r| r.bytes).sum();
        self.queue.push_back(EventKind::DataSpill {
            stage: key,
            machine,
            records: recs.len() as u64,
            bytes,
        });
        if self.dd() {
            let out = self
                .store
                .ingest_spill(key, recs, self.now, &mut self.cluster, &self.quota)?;
            self.queue.extend(out.events);
            if let Some(master) = self.jobs[j].stages[s].master.as_mut() {
                let delta = match &master.trigger {
                    TriggerSpec::CustomCounter { counter_id, .. } => match counter_id.as_str() {
                        "bytes" => bytes as i64,
                        "kv_pairs" => recs.len() as i64,
                        other => out.counter_deltas.get(other).copied().unwrap_or(0),
                    },
                    _ => 0,
                };
                let granules = self.store.catalog.stage_granules_mut(key);
                self.queue.extend(master.after_ingest(granules, &out.touched, delta));
            }
        } else {
            self.cc_store(j, s, machine, recs, logical);
        }
        Ok(())
    }

    fn cc_store(&mut self, j: usize, s: usize, machine: MachineId, recs: &[Record], logical: Option<usize>) {
        let consumers: Vec<usize> = self.jobs[j].graph.consumers(s).to_vec();
        let parts: Vec<u32> = consumers
            .iter()
            .map(|&c| self.jobs[j].graph.stages[c].partitions)
            .collect();
        let n = self.cfg.granules;
        let key_space = self.store.config.key_space;
        let mut stored: BTreeMap<u32, u64> = BTreeMap::new();
        for r in recs {
            let index = match parts.first() {
                Some(&p) => partition_for_key(r.key, p, key_space),
                None => granule_index_for_key(r.key, n, key_space),
            };
            *stored.entry(index).or_default() += r.bytes;
            for (ci, &c) in consumers.iter().enumerate() {
                let p = partition_for_key(r.key, parts[ci], key_space);
                if let Some(l) = logical {
                    *self.jobs[j].stages[s].cc_logical[l]
                        .out
                        .entry((c, p, machine))
                        .or_default() += r.bytes;
                }
                let agg = self.jobs[j].stages[c].cc_part_agg.entry(p).or_default();
                *agg = agg.merge(Aggregate {
                    count: 1,
                    sum: r.value as u64,
                });
            }
        }
        let key = self.jobs[j].stages[s].key;
        for (index, bytes) in stored {
            self.cluster.add_stored(j as u32, machine, bytes);
            self.queue.push_back(EventKind::Stored {
                granule: key.granule(index),
                machine,
                bytes,
                writeback: false,
            });
        }
    }

    // ---- protocol reactions (data-driven) ------------------------------------------------

    fn locations(&self, gid: GranuleId, bytes: u64) -> BTreeMap<MachineId, u64> {
        let g = self.store.catalog.granule(gid);
        let stored = g.stored_bytes();
        g.machines()
            .into_iter()
            .map(|m| {
                let share = if stored == 0 {
                    0
                } else {
                    (bytes as u128 * g.bytes_on(m) as u128 / stored as u128) as u64
                };
                (m, share)
            })
            .collect()
    }

    fn on_data_ready(
        &mut self,
        gid: GranuleId,
        consumers: &[StageKey],
        records: u64,
        stats: &crate::model::GranuleStats,
    ) -> Result<(), SimError> {
        if !self.dd() || records == 0 {
            return Ok(());
        }
        let j = gid.job as usize;
        for c in consumers {
            let cs = c.stage as usize;
            let rules = self.jobs[j].graph.stages[cs].rules.clone();
            let mut decision = StatusDecision::NoNewAction;
            if !rules.is_empty() {
                self.queue.push_back(EventKind::StatusQuery {
                    granule: gid,
                    consumer: *c,
                    stats: stats.clone(),
                });
                decision = evaluate_rules(&rules, stats);
                self.queue.push_back(EventKind::StatusDecision {
                    granule: gid,
                    consumer: *c,
                    decision: decision.clone(),
                });
            }
            let snapshot = self.store.catalog.granule(gid).unconsumed;
            let logic = self.jobs[j].graph.stages[cs].logic_id.clone();
            let entry_bytes = {
                let st = &mut self.jobs[j].stages[cs];
                let carried = st.carried.entry(gid).or_default();
                carried.awaiting = Some(snapshot);
                carried.held.bytes + snapshot.bytes
            };
            let mut entry = ReadyEntry::new(gid, entry_bytes, self.locations(gid, entry_bytes));
            entry.logic_id = logic;
            let st = &mut self.jobs[j].stages[cs];
            st.pool.insert(entry);
            apply_status_decision(&mut st.pool, gid, &decision)?;
            if decision == StatusDecision::Ignore {
                let carried = st.carried.remove(&gid).unwrap_or_default();
                for _ in 0..carried.owed {
                    self.release_consumption(gid)?;
                }
                if self.store.catalog.granule(gid).in_flight {
                    triggers::consume(self.store.catalog.granule_mut(gid));
                    self.release_consumption(gid)?;
                }
                self.check_stage(j, cs)?;
            }
            self.dirty = true;
        }
        Ok(())
    }

    /// A consumption of `gid` finished without a write-back.
    fn release_consumption(&mut self, gid: GranuleId) -> Result<(), SimError> {
        let (j, s) = (gid.job as usize, gid.stage as usize);
        let granules = self.store.catalog.stage_granules_mut(gid.stage_key());
        if let Some(master) = self.jobs[j].stages[s].master.as_mut() {
            self.queue.extend(master.after_consumed(granules, gid.index));
        }
        Ok(())
    }

    fn on_ready_all(&mut self, stage: StageKey) -> Result<(), SimError> {
        let (j, s) = (stage.job as usize, stage.stage as usize);
        for c in self.jobs[j].graph.consumers(s).to_vec() {
            self.jobs[j].stages[c].ready_all.insert(s);
            self.check_stage(j, c)?;
        }
        Ok(())
    }

    // ---- resources -----------------------------------------------------------------------

    fn fair_share(&self) -> f64 {
        self.cfg.compute_units / self.active.len().max(1) as f64
    }

    fn view(&self, j: usize) -> ResourceView {
        let share = self.fair_share();
        let mut v = ResourceView::default();
        for m in self.cluster.alive() {
            let i = m.machine_id.0 as usize;
            let free = self.cfg.compute_units - self.used[i];
            let mine = share - self.job_used[j][i];
            v.available.insert(m.machine_id, free.min(mine).max(0.0));
            v.capacity.insert(m.machine_id, self.cfg.compute_units);
        }
        v
    }

    fn take_units(&mut self, j: usize, m: MachineId, units: f64) {
        self.used[m.0 as usize] += units;
        self.job_used[j][m.0 as usize] += units;
    }

    fn free_units(&mut self, j: usize, m: MachineId, units: f64) {
        let u = &mut self.used[m.0 as usize];
        *u = (*u - units).max(0.0);
        let u = &mut self.job_used[j][m.0 as usize];
        *u = (*u - units).max(0.0);
        self.dirty = true;
    }

    // ---- scheduling ----------------------------------------------------------------------

    fn schedule(&mut self) -> Result<(), SimError> {
        let active = self.active.clone();
        for j in active {
            let order: Vec<usize> = self.jobs[j].graph.topo_order().to_vec();
            for s in order {
                if self.dd() {
                    self.schedule_dd_stage(j, s)?;
                } else {
                    self.schedule_cc_stage(j, s)?;
                }
            }
        }
        Ok(())
    }

    fn unit_cap(&self, units: f64) -> f64 {
        units.min(self.fair_share())
    }

    fn schedule_dd_stage(&mut self, j: usize, s: usize) -> Result<(), SimError> {
        let units = self.unit_cap(self.cfg.root_task_units);
        while let Some(&input) = self.jobs[j].stages[s].pending_root.front() {
            let Some(m) = self.view(j).least_loaded(units) else {
                break;
            };
            self.jobs[j].stages[s].pending_root.pop_front();
            self.launch_simple(
                j,
                s,
                m,
                units,
                chunks(input, self.cfg.spill_chunk_bytes),
                TaskKind::Root,
                None,
            );
        }
        while let Some(lost) = self.jobs[j].stages[s].pending_recovery.front().cloned() {
            let Some(m) = self.view(j).least_loaded(units) else {
                break;
            };
            self.jobs[j].stages[s].pending_recovery.pop_front();
            let bytes = lost.iter().map(|l| l.1).sum();
            let mut item = Item::plain(bytes);
            item.credit = 0;
            self.launch_simple(j, s, m, units, vec![item], TaskKind::Recovery(lost), None);
        }
        if self.jobs[j].stages[s].pool.is_empty() {
            return Ok(());
        }
        // locations move with failures and restores; read them fresh
        let fresh: Vec<(GranuleId, BTreeMap<MachineId, u64>)> = self.jobs[j].stages[s]
            .pool
            .entries
            .values()
            .map(|e| (e.granule, self.locations(e.granule, e.bytes)))
            .collect();
        for (g, loc) in fresh {
            if let Some(e) = self.jobs[j].stages[s].pool.entries.get_mut(&g) {
                e.locations = loc;
            }
        }
        let view = self.view(j);
        let params = AllocParams {
            min_units: self.unit_cap(self.cfg.min_task_units),
            max_units_per_task: self.cfg.max_units_per_task,
        };
        let held: Vec<ReadyEntry> = {
            let pool = &mut self.jobs[j].stages[s].pool;
            let ids: Vec<GranuleId> = pool
                .entries
                .keys()
                .filter(|g| self.recovering.contains(g))
                .copied()
                .collect();
            ids.iter().filter_map(|g| pool.entries.remove(g)).collect()
        };
        let assignments = {
            let pool = &mut self.jobs[j].stages[s].pool;
            let a = schedule_iteration(pool, &view, params, self.cfg.retry_limit, &mut self.next_task);
            for e in held {
                pool.insert(e);
            }
            a
        };
        for a in assignments {
            self.launch_consumer(j, s, a)?;
        }
        Ok(())
    }

    fn launch_consumer(&mut self, j: usize, s: usize, a: crate::execution::TaskAssignment) -> Result<(), SimError> {
        let pipelined = self.jobs[j]
            .graph
            .producers(s)
            .iter()
            .any(|&p| matches!(self.jobs[j].graph.stages[p].trigger, TriggerSpec::Pipelining { .. }));
        let mut items = Vec::new();
        for &gid in &a.granules {
            let c = self.jobs[j].stages[s].carried.remove(&gid).unwrap_or_default();
            let mut payload = c.held;
            let mut owed = c.owed;
            let mut final_round = !c.held_partial;
            if let Some(snap) = c.awaiting {
                let producer_done = self.jobs[j].stages[gid.stage as usize]
                    .master
                    .as_ref()
                    .is_none_or(|m| m.progress.producer_done);
                let g = self.store.catalog.granule_mut(gid);
                if g.in_flight {
                    let busy = g.outstanding > 0;
                    let u = triggers::consume(g);
                    merge(&mut payload, &u);
                    owed += 1;
                    final_round = !pipelined || (producer_done && !busy);
                } else {
                    merge(&mut payload, &snap);
                }
            }
            let g = self.store.catalog.granule(gid);
            let stored = g.stored_bytes();
            let local = g.bytes_on(a.machine);
            let remote = if stored == 0 {
                0
            } else {
                (payload.bytes as u128 * (stored - local.min(stored)) as u128 / stored as u128) as u64
            };
            let credit = if pipelined {
                if final_round {
                    g.ingested_bytes
                } else {
                    0
                }
            } else {
                payload.bytes
            };
            items.push(Item {
                granule: Some(gid),
                bytes: payload.bytes,
                fetch_secs: remote as f64 / self.cfg.shuffle_bandwidth,
                fetched: remote == 0,
                remote,
                credit,
                payload,
                owed,
                final_round,
            });
        }
        let id = a.task_id;
        let input: u64 = items.iter().map(|i| i.bytes).sum();
        let remote: u64 = items.iter().map(|i| i.remote).sum();
        self.emit(EventKind::TaskLaunched {
            task: id,
            stage: self.jobs[j].stages[s].key,
            machine: a.machine,
            resources: a.resources,
            input_bytes: input,
            remote_bytes: remote,
            granules: a.granules.clone(),
            logic_id: a.logic_id.clone(),
            speculative_of: None,
        });
        self.insert_task(
            id,
            j,
            s,
            a.machine,
            a.resources,
            items,
            TaskKind::Consumer,
            a.logic_id,
            pipelined,
        );
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn insert_task(
        &mut self,
        id: TaskId,
        j: usize,
        s: usize,
        m: MachineId,
        units: f64,
        items: Vec<Item>,
        kind: TaskKind,
        logic: String,
        pipelined: bool,
    ) {
        let task = TaskRt {
            job: j,
            stage: s,
            machine: m,
            resources: units,
            speed: 1.0,
            items: items.into(),
            phase: Phase::Compute,
            remaining: 0.0,
            since: self.now,
            version: 0,
            processed: 0,
            remote: 0,
            granules_done: Vec::new(),
            agg: Aggregate::default(),
            any_final: false,
            logic,
            pipelined,
            kind,
        };
        let is_original = !matches!(
            task.kind,
            TaskKind::Recovery(_) | TaskKind::Cc { clone_of: Some(_), .. }
        );
        self.tasks.insert(id, task);
        self.take_units(j, m, units);
        let st = &mut self.jobs[j].stages[s];
        st.running.insert(id);
        st.last_machine = m;
        if is_original {
            if let Some(sd) = self.slowdowns.iter_mut().find(|x| x.0 == j && x.1 == s && !x.4) {
                sd.4 = true;
                let (after, factor) = (sd.2, sd.3);
                self.push(self.now + after, Ev::Slow { task: id, factor });
            }
        }
        self.schedule_check();
        self.start_next(id);
    }

    #[allow(clippy::too_many_arguments)]
    fn launch_simple(
        &mut self,
        j: usize,
        s: usize,
        m: MachineId,
        units: f64,
        items: Vec<Item>,
        kind: TaskKind,
        speculative_of: Option<TaskId>,
    ) -> TaskId {
        let id = TaskId(self.next_task);
        self.next_task += 1;
        let input = items.iter().map(|i| i.bytes).sum();
        let logic = self.jobs[j].graph.stages[s].logic_id.clone();
        self.emit(EventKind::TaskLaunched {
            task: id,
            stage: self.jobs[j].stages[s].key,
            machine: m,
            resources: units,
            input_bytes: input,
            remote_bytes: 0,
            granules: Vec::new(),
            logic_id: logic.clone(),
            speculative_of,
        });
        self.insert_task(id, j, s, m, units, items, kind, logic, false);
        id
    }

    fn schedule_check(&mut self) {
        if !self.check_pending {
            self.check_pending = true;
            let t = self.now + self.cfg.straggler_check_s;
            self.push(t, Ev::Check);
        }
    }

    // ---- task progress -----------------------------------------------------------------

    fn rate(&self, t: &TaskRt) -> f64 {
        t.resources * t.speed * self.cfg.unit_rate()
    }

    fn start_next(&mut self, id: TaskId) {
        let t = self.tasks.get_mut(&id).expect("live task");
        let Some(item) = t.items.front() else {
            // nothing left: complete at once
            t.phase = Phase::Compute;
            t.remaining = 0.0;
            t.version += 1;
            let v = t.version;
            self.push(self.now, Ev::Step { task: id, version: v });
            return;
        };
        if !item.fetched && item.fetch_secs > 0.0 {
            t.phase = Phase::Fetch;
            t.version += 1;
            let (v, at) = (t.version, self.now + item.fetch_secs);
            self.push(at, Ev::Step { task: id, version: v });
        } else {
            self.begin_compute(id);
        }
    }

    fn begin_compute(&mut self, id: TaskId) {
        let rate = self.rate(&self.tasks[&id]);
        let t = self.tasks.get_mut(&id).expect("live task");
        t.phase = Phase::Compute;
        t.remaining = t.items.front().map_or(0.0, |i| i.bytes as f64);
        t.since = self.now;
        t.version += 1;
        let (v, at) = (t.version, self.now + t.remaining / rate);
        self.push(at, Ev::Step { task: id, version: v });
    }

    fn set_speed(&mut self, id: TaskId, speed: f64) {
        let rate = self.rate(&self.tasks[&id]);
        let now = self.now;
        let t = self.tasks.get_mut(&id).expect("live task");
        if t.phase != Phase::Compute {
            t.speed = speed;
            return;
        }
        t.remaining = (t.remaining - (now - t.since) * rate).max(0.0);
        t.since = now;
        t.speed = speed;
        t.version += 1;
        let v = t.version;
        let rate = self.rate(&self.tasks[&id]);
        let at = now + self.tasks[&id].remaining / rate;
        self.push(at, Ev::Step { task: id, version: v });
    }

    /// Bytes of the current item processed so far.
    fn partial(&self, id: TaskId) -> u64 {
        let t = &self.tasks[&id];
        match (t.phase, t.items.front()) {
            (Phase::Compute, Some(i)) => {
                let left = (t.remaining - (self.now - t.since) * self.rate(t)).max(0.0);
                (i.bytes as f64 - left).max(0.0) as u64
            }
            _ => 0,
        }
    }

    fn finish_item(&mut self, id: TaskId) -> Result<(), SimError> {
        let (j, s, machine) = {
            let t = &self.tasks[&id];
            (t.job, t.stage, t.machine)
        };
        let Some(item) = self.tasks.get_mut(&id).expect("live").items.pop_front() else {
            return self.finish_task(id);
        };
        {
            let t = self.tasks.get_mut(&id).expect("live");
            t.processed += item.bytes;
            t.remote += item.remote;
            if let Some(g) = item.granule {
                t.granules_done.push(g);
            }
            if item.final_round {
                t.agg = t.agg.merge(item.payload.agg);
                t.any_final = true;
            }
        }
        let kind = self.tasks[&id].kind.clone();
        match kind {
            TaskKind::Root => self.credit(j, s, item.credit, machine, None)?,
            TaskKind::Consumer => {
                let gid = item.granule.expect("consumer items are granules");
                let pipelined = self.tasks[&id].pipelined;
                if pipelined && !item.final_round {
                    for _ in 1..item.owed {
                        self.release_consumption(gid)?;
                    }
                    self.write_back(gid, item.payload.agg)?;
                } else {
                    for _ in 0..item.owed {
                        self.release_consumption(gid)?;
                    }
                }
                self.credit(j, s, item.credit, machine, None)?;
            }
            TaskKind::Recovery(lost) => {
                for (g, b) in lost {
                    self.recovering.remove(&g);
                    if !self.jobs[g.job as usize].complete {
                        let ev = self.store.restore(g, b, self.now, &mut self.cluster, &self.quota);
                        self.queue.extend(ev);
                    }
                }
                self.dirty = true;
            }
            TaskKind::Cc {
                logical, items_done, ..
            } => {
                let done = items_done + 1;
                if let TaskKind::Cc { items_done, .. } = &mut self.tasks.get_mut(&id).expect("live").kind {
                    *items_done = done;
                }
                let l = &mut self.jobs[j].stages[s].cc_logical[logical];
                if done > l.credited_items {
                    l.credited_items = done;
                    self.credit(j, s, item.credit, machine, Some(logical))?;
                }
            }
        }
        if self.tasks[&id].items.is_empty() {
            self.finish_task(id)
        } else {
            self.start_next(id);
            Ok(())
        }
    }

    fn write_back(&mut self, gid: GranuleId, partial: Aggregate) -> Result<(), SimError> {
        let (j, p) = (gid.job as usize, gid.stage as usize);
        let bytes = self.jobs[j].graph.stages[p].output.per_record_bytes().max(1);
        let ev = self.store.writeback(
            gid,
            ComputeType::StatefulCa,
            partial,
            bytes,
            self.now,
            &mut self.cluster,
            &self.quota,
        )?;
        self.queue.extend(ev);
        let granules = self.store.catalog.stage_granules_mut(gid.stage_key());
        if let Some(master) = self.jobs[j].stages[p].master.as_mut() {
            self.queue.extend(master.after_writeback(granules, gid.index));
        }
        Ok(())
    }

    fn finish_task(&mut self, id: TaskId) -> Result<(), SimError> {
        let t = self.tasks.remove(&id).expect("live task");
        self.free_units(t.job, t.machine, t.resources);
        let st = &mut self.jobs[t.job].stages[t.stage];
        st.running.remove(&id);
        let stateful = self.jobs[t.job].graph.stages[t.stage].compute_type == ComputeType::StatefulCa;
        let aggregate = match &t.kind {
            TaskKind::Cc { logical, .. } if stateful => {
                let p = self.jobs[t.job].stages[t.stage].cc_logical[*logical].partition;
                Some(
                    self.jobs[t.job].stages[t.stage]
                        .cc_part_agg
                        .get(&p)
                        .copied()
                        .unwrap_or_default(),
                )
            }
            TaskKind::Consumer if stateful && t.any_final => Some(t.agg),
            _ => None,
        };
        self.emit(EventKind::TaskCompleted {
            task: id,
            stage: self.jobs[t.job].stages[t.stage].key,
            machine: t.machine,
            processed_bytes: t.processed,
            remote_bytes: t.remote,
            granules: t.granules_done.clone(),
            aggregate,
            final_round: !t.pipelined || t.any_final,
        });
        if let TaskKind::Cc { logical, .. } = t.kind {
            self.cc_logical_done(t.job, t.stage, logical, t.machine, id)?;
        }
        self.check_stage(t.job, t.stage)
    }

    fn kill(&mut self, id: TaskId) -> TaskRt {
        let processed = self.tasks[&id].processed + self.partial(id);
        let t = self.tasks.remove(&id).expect("live task");
        self.free_units(t.job, t.machine, t.resources);
        self.jobs[t.job].stages[t.stage].running.remove(&id);
        self.emit(EventKind::TaskKilled {
            task: id,
            stage: self.jobs[t.job].stages[t.stage].key,
            processed_bytes: processed,
            granules: t.granules_done.clone(),
        });
        t
    }

    /// Hands unprocessed granule items back to their consumer pool.
    fn return_items(&mut self, j: usize, s: usize, items: Vec<Item>, logic: &str) {
        for item in items {
            let gid = item.granule.expect("consumer items are granules");
            let bytes = {
                let c = self.jobs[j].stages[s].carried.entry(gid).or_default();
                merge(&mut c.held, &item.payload);
                c.owed += item.owed;
                c.held_partial |= !item.final_round;
                c.held.bytes + c.awaiting.map_or(0, |a| a.bytes)
            };
            let mut entry = ReadyEntry::new(gid, bytes, self.locations(gid, bytes));
            entry.logic_id = logic.to_string();
            self.jobs[j].stages[s].pool.insert(entry);
        }
        self.dirty = true;
    }

    // ---- stragglers ----------------------------------------------------------------------

    /// Speed of each running task relative to the mean of its stage peers,
    /// or to nominal speed when it runs alone.
    fn slow_tasks(&self, eligible: impl Fn(&TaskRt) -> bool) -> Vec<(TaskId, f64)> {
        let mut out = Vec::new();
        for (&id, t) in &self.tasks {
            if !eligible(t) {
                continue;
            }
            let peers: Vec<f64> = self.jobs[t.job].stages[t.stage]
                .running
                .iter()
                .filter(|&&o| o != id)
                .map(|o| self.tasks[o].speed)
                .collect();
            let reference = if peers.is_empty() {
                1.0
            } else {
                peers.iter().sum::<f64>() / peers.len() as f64
            };
            if t.speed < self.cfg.theta * reference {
                out.push((id, t.speed / reference));
            }
        }
        out
    }

    fn dd_check_stragglers(&mut self) {
        let slow = self.slow_tasks(|t| matches!(t.kind, TaskKind::Consumer) && !t.pipelined && t.items.len() >= 2);
        for (id, ratio) in slow {
            let grans: Vec<GranuleId> = self.tasks[&id].items.iter().filter_map(|i| i.granule).collect();
            let Ok((kept, moved_ids)) = split_straggler(&grans, ratio) else {
                continue;
            };
            let (j, s, logic, moved) = {
                let t = self.tasks.get_mut(&id).expect("live");
                let moved = t.items.split_off(kept.len());
                (t.job, t.stage, t.logic.clone(), moved)
            };
            self.emit(EventKind::StragglerSplit {
                task: id,
                speed_ratio: ratio,
                kept,
                reassigned: moved_ids,
            });
            self.return_items(j, s, moved.into_iter().collect(), &logic);
        }
    }

    fn cc_check_stragglers(&mut self) {
        let slow = self.slow_tasks(|t| matches!(t.kind, TaskKind::Cc { clone_of: None, .. }));
        for (id, _) in slow {
            let (j, s, logical, machine) = {
                let t = &self.tasks[&id];
                let TaskKind::Cc { logical, .. } = t.kind else { continue };
                (t.job, t.stage, logical, t.machine)
            };
            if self.jobs[j].stages[s].cc_logical[logical].copies.len() > 1 {
                continue;
            }
            let units = self.unit_cap(self.cfg.cc_task_units);
            let mut view = self.view(j);
            view.available.remove(&machine);
            let Some(m) = view.least_loaded(units) else { continue };
            self.launch_cc(j, s, logical, m, units, Some(id));
        }
    }

    // ---- compute-centric baseline ------------------------------------------------------

    fn schedule_cc_stage(&mut self, j: usize, s: usize) -> Result<(), SimError> {
        let units = if self.jobs[j].graph.is_root(s) {
            self.cfg.root_task_units
        } else {
            self.cfg.cc_task_units
        };
        let units = self.unit_cap(units);
        while let Some(&l) = self.jobs[j].stages[s].cc_pending.front() {
            let Some(m) = self.view(j).least_loaded(units) else {
                break;
            };
            self.jobs[j].stages[s].cc_pending.pop_front();
            self.launch_cc(j, s, l, m, units, None);
        }
        Ok(())
    }

    fn producer_logicals(&self, j: usize, s: usize) -> Vec<(usize, usize)> {
        self.jobs[j]
            .graph
            .producers(s)
            .iter()
            .flat_map(|&p| (0..self.jobs[j].stages[p].cc_logical.len()).map(move |l| (p, l)))
            .collect()
    }

    fn remote_of(&self, j: usize, p: usize, l: usize, c: usize, part: u32, m: MachineId) -> u64 {
        self.jobs[j].stages[p].cc_logical[l]
            .out
            .iter()
            .filter(|((cc, pp, mm), _)| *cc == c && *pp == part && *mm != m)
            .map(|(_, b)| b)
            .sum()
    }

    fn launch_cc(&mut self, j: usize, s: usize, l: usize, m: MachineId, units: f64, clone_of: Option<TaskId>) {
        let root = self.jobs[j].graph.is_root(s);
        let logical = &self.jobs[j].stages[s].cc_logical[l];
        let part = logical.partition;
        let kind = TaskKind::Cc {
            logical: l,
            clone_of,
            items_done: 0,
            fetch: (!root).then_some(CcFetch {
                fetch_t: self.now,
                waiting: 0,
                partition: part,
            }),
        };
        let id = if root {
            let items = chunks(logical.input, self.cfg.spill_chunk_bytes);
            self.launch_simple(j, s, m, units, items, kind, clone_of)
        } else {
            let id = TaskId(self.next_task);
            self.next_task += 1;
            let mut done: Vec<(Seconds, usize, usize)> = Vec::new();
            let mut waiting = 0;
            for (p, pl) in self.producer_logicals(j, s) {
                let lg = &self.jobs[j].stages[p].cc_logical[pl];
                if lg.done {
                    done.push((lg.finish_t, p, pl));
                } else {
                    waiting += 1;
                }
            }
            done.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            let mut fetch_t = self.now;
            let mut remote = 0;
            for &(fin, p, pl) in &done {
                let r = self.remote_of(j, p, pl, s, part, m);
                fetch_t = fetch_t.max(fin) + r as f64 / self.cfg.shuffle_bandwidth;
                remote += r;
            }
            let logic = self.jobs[j].graph.stages[s].logic_id.clone();
            self.emit(EventKind::TaskLaunched {
                task: id,
                stage: self.jobs[j].stages[s].key,
                machine: m,
                resources: units,
                input_bytes: self.partition_bytes(j, s, part),
                remote_bytes: remote,
                granules: Vec::new(),
                logic_id: logic.clone(),
                speculative_of: clone_of,
            });
            let kind = TaskKind::Cc {
                logical: l,
                clone_of,
                items_done: 0,
                fetch: Some(CcFetch {
                    fetch_t,
                    waiting,
                    partition: part,
                }),
            };
            // insert without starting; the fetch phase drives it
            self.insert_cc_waiting(id, j, s, m, units, kind, logic, remote);
            id
        };
        self.jobs[j].stages[s].cc_logical[l].copies.push(id);
    }

    #[allow(clippy::too_many_arguments)]
    fn insert_cc_waiting(
        &mut self,
        id: TaskId,
        j: usize,
        s: usize,
        m: MachineId,
        units: f64,
        kind: TaskKind,
        logic: String,
        remote: u64,
    ) {
        let (fetch_t, waiting) = match &kind {
            TaskKind::Cc { fetch: Some(f), .. } => (f.fetch_t, f.waiting),
            _ => unreachable!("consumer tasks fetch"),
        };
        let task = TaskRt {
            job: j,
            stage: s,
            machine: m,
            resources: units,
            speed: 1.0,
            items: VecDeque::new(),
            phase: Phase::CcWait,
            remaining: 0.0,
            since: self.now,
            version: 0,
            processed: 0,
            remote,
            granules_done: Vec::new(),
            agg: Aggregate::default(),
            any_final: false,
            logic,
            pipelined: false,
            kind,
        };
        let is_original = matches!(task.kind, TaskKind::Cc { clone_of: None, .. });
        self.tasks.insert(id, task);
        self.take_units(j, m, units);
        let st = &mut self.jobs[j].stages[s];
        st.running.insert(id);
        st.last_machine = m;
        if is_original {
            if let Some(sd) = self.slowdowns.iter_mut().find(|x| x.0 == j && x.1 == s && !x.4) {
                sd.4 = true;
                let (after, factor) = (sd.2, sd.3);
                self.push(self.now + after, Ev::Slow { task: id, factor });
            }
        }
        self.schedule_check();
        if waiting == 0 {
            self.push(fetch_t, Ev::Step { task: id, version: 0 });
        }
    }

    fn partition_bytes(&self, j: usize, s: usize, part: u32) -> u64 {
        self.producer_logicals(j, s)
            .into_iter()
            .flat_map(|(p, l)| self.jobs[j].stages[p].cc_logical[l].out.iter())
            .filter(|((c, pp, _), _)| *c == s && *pp == part)
            .map(|(_, b)| b)
            .sum()
    }

    fn cc_fetch_done(&mut self, id: TaskId) {
        let (j, s, part) = {
            let t = &self.tasks[&id];
            let TaskKind::Cc { fetch: Some(f), .. } = &t.kind else {
                unreachable!("cc consumer")
            };
            (t.job, t.stage, f.partition)
        };
        let bytes = self.partition_bytes(j, s, part);
        self.tasks
            .get_mut(&id)
            .expect("live")
            .items
            .push_back(Item::plain(bytes));
        self.begin_compute(id);
    }

    fn cc_logical_done(
        &mut self,
        j: usize,
        s: usize,
        l: usize,
        machine: MachineId,
        winner: TaskId,
    ) -> Result<(), SimError> {
        let copies: Vec<TaskId> = {
            let lg = &mut self.jobs[j].stages[s].cc_logical[l];
            lg.done = true;
            lg.finish_t = self.now;
            lg.copies.clone()
        };
        self.jobs[j].stages[s].cc_done += 1;
        for c in copies {
            if c != winner && self.tasks.contains_key(&c) {
                self.kill(c);
            }
        }
        let _ = machine;
        for c in self.jobs[j].graph.consumers(s).to_vec() {
            let running: Vec<TaskId> = self.jobs[j].stages[c].running.iter().copied().collect();
            for t in running {
                let (m, part, phase) = {
                    let tr = &self.tasks[&t];
                    let TaskKind::Cc { fetch: Some(f), .. } = &tr.kind else {
                        continue;
                    };
                    (tr.machine, f.partition, tr.phase)
                };
                if phase != Phase::CcWait {
                    continue;
                }
                let r = self.remote_of(j, s, l, c, part, m);
                let now = self.now;
                let bw = self.cfg.shuffle_bandwidth;
                let tr = self.tasks.get_mut(&t).expect("live");
                tr.remote += r;
                let TaskKind::Cc { fetch: Some(f), .. } = &mut tr.kind else {
                    unreachable!()
                };
                f.fetch_t = f.fetch_t.max(now) + r as f64 / bw;
                f.waiting = f.waiting.saturating_sub(1);
                if f.waiting == 0 {
                    let (at, v) = (f.fetch_t, tr.version);
                    self.push(at, Ev::Step { task: t, version: v });
                }
            }
            self.cc_maybe_launch(j, c);
        }
        Ok(())
    }

    fn cc_maybe_launch(&mut self, j: usize, c: usize) {
        if self.jobs[j].stages[c].cc_created {
            return;
        }
        let producers = self.jobs[j].graph.producers(c).to_vec();
        if !producers.iter().all(|&p| self.jobs[j].stages[p].cc_created) {
            return;
        }
        let total: usize = producers.iter().map(|&p| self.jobs[j].stages[p].cc_logical.len()).sum();
        let done: usize = producers.iter().map(|&p| self.jobs[j].stages[p].cc_done).sum();
        if (done as f64) + EPS < self.cfg.cc_launch_fraction * total as f64 {
            return;
        }
        let p = self.jobs[j].graph.stages[c].partitions;
        let st = &mut self.jobs[j].stages[c];
        st.cc_logical = (0..p)
            .map(|i| CcLogical {
                partition: i,
                ..Default::default()
            })
            .collect();
        st.cc_pending = (0..p as usize).collect();
        st.cc_created = true;
        self.dirty = true;
    }

    // ---- failures ----------------------------------------------------------------------

    fn fail_machine(&mut self, m: MachineId) -> Result<(), SimError> {
        if self.cluster.machine(m).failed {
            return Ok(());
        }
        self.emit(EventKind::MachineFailed { machine: m });
        let victims: Vec<TaskId> = self
            .tasks
            .iter()
            .filter(|(_, t)| t.machine == m)
            .map(|(&id, _)| id)
            .collect();
        for id in victims {
            let t = self.kill(id);
            let (j, s) = (t.job, t.stage);
            match t.kind {
                TaskKind::Root => {
                    let left: u64 = t.items.iter().map(|i| i.bytes).sum();
                    self.jobs[j].stages[s].pending_root.push_back(left);
                }
                TaskKind::Consumer => {
                    let logic = t.logic.clone();
                    self.return_items(j, s, t.items.into_iter().collect(), &logic);
                }
                TaskKind::Recovery(lost) => self.jobs[j].stages[s].pending_recovery.push_back(lost),
                TaskKind::Cc { logical, .. } => {
                    let lg = &mut self.jobs[j].stages[s].cc_logical[logical];
                    lg.copies.retain(|&c| c != id);
                    if !lg.done && lg.copies.is_empty() {
                        self.jobs[j].stages[s].cc_pending.push_front(logical);
                    }
                }
            }
        }
        if self.dd() {
            let lost = self.store.lose_machine(m, self.now, &mut self.cluster);
            let mut by_stage: BTreeMap<StageKey, Vec<(GranuleId, u64)>> = BTreeMap::new();
            for (g, b) in lost {
                self.emit(EventKind::DataLost {
                    granule: g,
                    machine: m,
                    bytes: b,
                });
                by_stage.entry(g.stage_key()).or_default().push((g, b));
            }
            for (stage, lost) in by_stage {
                let bytes = lost.iter().map(|l| l.1).sum();
                self.emit(EventKind::StageReexecuted { stage, bytes });
                self.recovering.extend(lost.iter().map(|l| l.0));
                self.jobs[stage.job as usize].stages[stage.stage as usize]
                    .pending_recovery
                    .push_back(lost);
            }
            self.recompute_quota();
        } else {
            let mc = self.cluster.machine_mut(m);
            mc.failed = true;
        }
        self.dirty = true;
        Ok(())
    }
}

fn chunks(input: u64, chunk: u64) -> Vec<Item> {
    if input == 0 {
        return vec![Item::plain(0)];
    }
    let mut out = Vec::new();
    let mut left = input;
    while left > 0 {
        let b = left.min(chunk);
        out.push(Item::plain(b));
        left -= b;
    }
    out
}
