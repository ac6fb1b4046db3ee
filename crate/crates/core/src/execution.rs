//! Data-driven task creation: group ready granules into subsets, pick a
//! machine per subset, size tasks so that all finish together, split
//! stragglers and apply runtime status decisions.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::model::{GranuleId, GranuleStats, MachineId, StageKey, StatusDecision, StatusRule, TaskId, GB};

/// Deferrals of one subset before its pairings are broken up.
pub const DEFAULT_RETRY_LIMIT: u32 = 3;
/// Straggler threshold relative to the mean rate of the other tasks.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("granule {0} is not in the ready pool")]
    UnknownGranule(GranuleId),
    #[error("task has at most one unprocessed granule")]
    NothingToSplit,
    #[error("no machine has resources for any subset")]
    AllDeferred,
}

/// A ready granule waiting for a task: a snapshot of its unconsumed bytes
/// and where they live.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadyEntry {
    pub granule: GranuleId,
    pub bytes: u64,
    pub locations: BTreeMap<MachineId, u64>,
    pub logic_id: String,
    pub retries: u32,
}

impl ReadyEntry {
    pub fn new(granule: GranuleId, bytes: u64, locations: BTreeMap<MachineId, u64>) -> Self {
        Self {
            granule,
            bytes,
            locations,
            logic_id: "default".into(),
            retries: 0,
        }
    }

    /// Machine with the largest share of the bytes (lowest id on ties).
    pub fn home(&self) -> Option<MachineId> {
        let mut best: Option<(u64, MachineId)> = None;
        for (&m, &b) in &self.locations {
            if b > 0 && best.is_none_or(|(bb, _)| b > bb) {
                best = Some((b, m));
            }
        }
        best.map(|(_, m)| m)
    }
}

/// Ready granules of one consumer stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadyPool {
    pub stage: StageKey,
    pub entries: BTreeMap<GranuleId, ReadyEntry>,
    /// Unordered pairs stored as (smaller, larger).
    pub conflicts: BTreeSet<(GranuleId, GranuleId)>,
    pub troublesome: BTreeSet<GranuleId>,
    /// Granules dropped by an `ignore` decision.
    pub skipped: BTreeSet<GranuleId>,
    pub max_input_per_task: Option<u64>,
}

impl ReadyPool {
    pub fn new(stage: StageKey) -> Self {
        Self {
            stage,
            entries: BTreeMap::new(),
            conflicts: BTreeSet::new(),
            troublesome: BTreeSet::new(),
            skipped: BTreeSet::new(),
            max_input_per_task: None,
        }
    }

    pub fn insert(&mut self, entry: ReadyEntry) {
        self.entries.insert(entry.granule, entry);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn add_conflict(&mut self, a: GranuleId, b: GranuleId) {
        if a != b {
            self.conflicts.insert((a.min(b), a.max(b)));
        }
    }

    pub fn conflicting(&self, a: GranuleId, b: GranuleId) -> bool {
        self.conflicts.contains(&(a.min(b), a.max(b)))
    }

    /// Largest input a non-troublesome subset may hold this round.
    pub fn gr_max(&self) -> u64 {
        let largest = self.entries.values().map(|e| e.bytes).max().unwrap_or(0);
        let cap = 2 * largest;
        match self.max_input_per_task {
            Some(limit) => cap.min(limit).max(largest),
            None => cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Subset {
    pub granules: Vec<GranuleId>,
    pub bytes: u64,
    pub troublesome: bool,
    pub logic_id: String,
}

struct Bin {
    granules: Vec<GranuleId>,
    bytes: u64,
    logic: String,
    rejected: bool,
}

impl Bin {
    fn accepts(&self, pool: &ReadyPool, e: &ReadyEntry, cap: u64) -> bool {
        self.logic == e.logic_id
            && self.bytes + e.bytes <= cap
            && self.granules.iter().all(|&g| !pool.conflicting(g, e.granule))
    }

    fn accepts_bin(&self, pool: &ReadyPool, other: &Bin, cap: u64) -> bool {
        self.logic == other.logic
            && self.bytes + other.bytes <= cap
            && self
                .granules
                .iter()
                .all(|&a| other.granules.iter().all(|&b| !pool.conflicting(a, b)))
    }
}

/// Groups the pool's granules into subsets of at most [`ReadyPool::gr_max`]
/// bytes. Granules are first packed with others homed on the same machine
/// (a spread granule's home is its largest materialization); partially
/// filled bins are then merged across machines in granule order. Conflicting
/// granules never share a subset and troublesome granules form one subset.
pub fn group_granules(pool: &ReadyPool) -> Vec<Subset> {
    let cap = pool.gr_max();
    let mut by_home: BTreeMap<Option<MachineId>, Vec<&ReadyEntry>> = BTreeMap::new();
    for e in pool.entries.values() {
        if !pool.troublesome.contains(&e.granule) {
            by_home.entry(e.home()).or_default().push(e);
        }
    }
    let mut done: Vec<Bin> = Vec::new();
    let mut leftovers: Vec<Bin> = Vec::new();
    for entries in by_home.values() {
        let mut bins: Vec<Bin> = Vec::new();
        for e in entries {
            match bins.iter_mut().find(|b| b.accepts(pool, e, cap)) {
                Some(b) => {
                    b.granules.push(e.granule);
                    b.bytes += e.bytes;
                }
                None => {
                    for b in bins.iter_mut().filter(|b| b.bytes + e.bytes > cap) {
                        b.rejected = true;
                    }
                    bins.push(Bin {
                        granules: vec![e.granule],
                        bytes: e.bytes,
                        logic: e.logic_id.clone(),
                        rejected: false,
                    });
                }
            }
        }
        for b in bins {
            if b.rejected || b.bytes == cap {
                done.push(b);
            } else {
                leftovers.push(b);
            }
        }
    }
    leftovers.sort_by_key(|b| b.granules[0]);
    let mut merged: Vec<Bin> = Vec::new();
    for b in leftovers {
        match merged.iter_mut().find(|m| m.accepts_bin(pool, &b, cap)) {
            Some(m) => {
                m.granules.extend(b.granules);
                m.bytes += b.bytes;
            }
            None => merged.push(b),
        }
    }
    done.extend(merged);
    let mut out: Vec<Subset> = done
        .into_iter()
        .map(|mut b| {
            b.granules.sort_unstable();
            Subset {
                granules: b.granules,
                bytes: b.bytes,
                troublesome: false,
                logic_id: b.logic,
            }
        })
        .collect();
    out.sort_by_key(|s| s.granules[0]);
    let trouble: Vec<&ReadyEntry> = pool.troublesome.iter().filter_map(|g| pool.entries.get(g)).collect();
    if let Some(first) = trouble.first() {
        out.push(Subset {
            granules: trouble.iter().map(|e| e.granule).collect(),
            bytes: trouble.iter().map(|e| e.bytes).sum(),
            troublesome: true,
            logic_id: first.logic_id.clone(),
        });
    }
    out
}

/// Per subset: the machine holding all of its granules, else the one holding
/// the most of its bytes (lowest id on ties). Troublesome subsets get `None`.
pub fn preferred_machines(subsets: &[Subset], pool: &ReadyPool) -> Vec<Option<MachineId>> {
    subsets
        .iter()
        .map(|s| {
            if s.troublesome {
                return None;
            }
            let mut per: BTreeMap<MachineId, (usize, u64)> = BTreeMap::new();
            for g in &s.granules {
                for (&m, &b) in &pool.entries[g].locations {
                    if b > 0 {
                        let slot = per.entry(m).or_default();
                        slot.0 += 1;
                        slot.1 += b;
                    }
                }
            }
            let holding_all = per
                .iter()
                .filter(|(_, (n, _))| *n == s.granules.len())
                .map(|(&m, &(_, b))| (m, b));
            let mut best: Option<(MachineId, u64)> = None;
            for (m, b) in holding_all {
                if best.is_none_or(|(_, bb)| b > bb) {
                    best = Some((m, b));
                }
            }
            if best.is_none() {
                for (&m, &(_, b)) in &per {
                    if best.is_none_or(|(_, bb)| b > bb) {
                        best = Some((m, b));
                    }
                }
            }
            best.map(|(m, _)| m)
        })
        .collect()
}

/// Resource units available to one job.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResourceView {
    pub available: BTreeMap<MachineId, f64>,
    pub capacity: BTreeMap<MachineId, f64>,
}

impl ResourceView {
    pub fn available(&self, m: MachineId) -> f64 {
        self.available.get(&m).copied().unwrap_or(0.0)
    }

    /// Machine with the most free units (lowest id on ties).
    pub fn least_loaded(&self, min_units: f64) -> Option<MachineId> {
        let mut best: Option<(f64, MachineId)> = None;
        for (&m, &a) in &self.available {
            if a > 0.0 && a >= min_units && best.is_none_or(|(ba, _)| a > ba) {
                best = Some((a, m));
            }
        }
        best.map(|(_, m)| m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AllocParams {
    /// A machine with fewer free units defers its subsets.
    pub min_units: f64,
    /// Upper bound on the units of any single task.
    pub max_units_per_task: Option<f64>,
}

impl Default for AllocParams {
    fn default() -> Self {
        Self {
            min_units: 0.0,
            max_units_per_task: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskAssignment {
    pub task_id: TaskId,
    pub granules: Vec<GranuleId>,
    pub machine: MachineId,
    pub resources: f64,
    pub input_bytes: u64,
    pub logic_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub assignments: Vec<TaskAssignment>,
    /// Indices of subsets not assigned this round.
    pub deferred: Vec<usize>,
}

/// Sizes tasks so that every task of the round finishes at the same time:
/// each subset gets `F * bytes` units with `F` the smallest ratio of free
/// units to assigned bytes over the chosen machines.
pub fn altruistic_allocation(
    subsets: &[Subset],
    choices: &[Option<MachineId>],
    view: &ResourceView,
    params: AllocParams,
    next_task: &mut u64,
) -> Result<Allocation, ExecError> {
    let usable = |m: MachineId| {
        let a = view.available(m);
        a > 0.0 && a >= params.min_units
    };
    let mut placed: Vec<(usize, MachineId)> = Vec::new();
    let mut deferred = Vec::new();
    for (i, (s, c)) in subsets.iter().zip(choices).enumerate() {
        let m = match c {
            Some(m) => Some(*m),
            None => view.least_loaded(params.min_units),
        };
        match m {
            Some(m) if usable(m) && s.bytes > 0 => placed.push((i, m)),
            _ => deferred.push(i),
        }
    }
    if placed.is_empty() {
        return if subsets.is_empty() {
            Ok(Allocation {
                assignments: vec![],
                deferred,
            })
        } else {
            Err(ExecError::AllDeferred)
        };
    }
    let mut bytes_on: BTreeMap<MachineId, f64> = BTreeMap::new();
    for &(i, m) in &placed {
        *bytes_on.entry(m).or_default() += subsets[i].bytes as f64 / GB as f64;
    }
    let mut f = bytes_on
        .iter()
        .map(|(&m, &b)| view.available(m) / b)
        .fold(f64::INFINITY, f64::min);
    if let Some(cap) = params.max_units_per_task {
        let largest = placed.iter().map(|&(i, _)| subsets[i].bytes).max().unwrap_or(1) as f64 / GB as f64;
        f = f.min(cap / largest);
    }
    let assignments = placed
        .into_iter()
        .map(|(i, m)| {
            let s = &subsets[i];
            *next_task += 1;
            TaskAssignment {
                task_id: TaskId(*next_task - 1),
                granules: s.granules.clone(),
                machine: m,
                resources: f * s.bytes as f64 / GB as f64,
                input_bytes: s.bytes,
                logic_id: s.logic_id.clone(),
            }
        })
        .collect();
    Ok(Allocation { assignments, deferred })
}

/// One scheduling pass over the pool. Assigned granules leave the pool.
/// Subsets deferred `retry_limit` times have their pairings recorded as
/// conflicts; a granule deferred alone that often becomes troublesome.
pub fn schedule_iteration(
    pool: &mut ReadyPool,
    view: &ResourceView,
    params: AllocParams,
    retry_limit: u32,
    next_task: &mut u64,
) -> Vec<TaskAssignment> {
    if pool.is_empty() {
        return Vec::new();
    }
    let subsets = group_granules(pool);
    let choices = preferred_machines(&subsets, pool);
    let alloc = match altruistic_allocation(&subsets, &choices, view, params, next_task) {
        Ok(a) => a,
        Err(_) => Allocation {
            assignments: vec![],
            deferred: (0..subsets.len()).collect(),
        },
    };
    for a in &alloc.assignments {
        for g in &a.granules {
            pool.entries.remove(g);
            pool.troublesome.remove(g);
        }
    }
    for &i in &alloc.deferred {
        let s = &subsets[i];
        if s.troublesome || s.bytes == 0 {
            continue;
        }
        let mut exhausted = false;
        for g in &s.granules {
            let e = pool.entries.get_mut(g).expect("deferred granule still pooled");
            e.retries += 1;
            exhausted |= e.retries >= retry_limit;
        }
        if !exhausted {
            continue;
        }
        if s.granules.len() == 1 {
            pool.troublesome.insert(s.granules[0]);
        } else {
            for (n, &a) in s.granules.iter().enumerate() {
                for &b in &s.granules[n + 1..] {
                    pool.add_conflict(a, b);
                }
            }
        }
        for g in &s.granules {
            pool.entries.get_mut(g).expect("pooled").retries = 0;
        }
    }
    alloc.assignments
}

/// Tasks progressing slower than `theta` times the mean rate of the other
/// running tasks of the stage.
pub fn detect_stragglers(rates: &[(TaskId, f64)], theta: f64) -> Vec<TaskId> {
    if rates.len() < 2 {
        return Vec::new();
    }
    let total: f64 = rates.iter().map(|r| r.1).sum();
    let peers = (rates.len() - 1) as f64;
    rates
        .iter()
        .filter(|(_, r)| *r < theta * (total - r) / peers)
        .map(|(t, _)| *t)
        .collect()
}

/// Splits a straggler's unprocessed granules (the one in progress first).
/// The straggler keeps `ceil(speed_ratio * n)` of them, at least the one in
/// progress; the rest is handed back for rescheduling.
pub fn split_straggler(
    unprocessed: &[GranuleId],
    speed_ratio: f64,
) -> Result<(Vec<GranuleId>, Vec<GranuleId>), ExecError> {
    let n = unprocessed.len();
    if n <= 1 {
        return Err(ExecError::NothingToSplit);
    }
    let keep = ((speed_ratio.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
    Ok((unprocessed[..keep].to_vec(), unprocessed[keep..].to_vec()))
}

/// First rule whose comparison holds decides; no match means no new action.
pub fn evaluate_rules(rules: &[StatusRule], stats: &GranuleStats) -> StatusDecision {
    rules
        .iter()
        .find(|r| r.op.holds(stats.counter(&r.counter_id), r.threshold))
        .map(|r| r.decision.clone())
        .unwrap_or(StatusDecision::NoNewAction)
}

pub fn apply_status_decision(
    pool: &mut ReadyPool,
    granule: GranuleId,
    decision: &StatusDecision,
) -> Result<(), ExecError> {
    let entry = pool
        .entries
        .get_mut(&granule)
        .ok_or(ExecError::UnknownGranule(granule))?;
    match decision {
        StatusDecision::NoNewAction => {}
        StatusDecision::Ignore => {
            pool.entries.remove(&granule);
            pool.troublesome.remove(&granule);
            pool.skipped.insert(granule);
        }
        StatusDecision::Replace(logic) => entry.logic_id = logic.clone(),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CmpOp;

    const HALF: u64 = GB / 2;

    fn stage() -> StageKey {
        StageKey::new(0, 1)
    }

    fn entry(i: u32, bytes: u64, locs: &[(u32, u64)]) -> ReadyEntry {
        ReadyEntry::new(
            stage().granule(i),
            bytes,
            locs.iter().map(|&(m, b)| (MachineId(m), b)).collect(),
        )
    }

    fn pool(entries: Vec<ReadyEntry>) -> ReadyPool {
        let mut p = ReadyPool::new(stage());
        for e in entries {
            p.insert(e);
        }
        p
    }

    fn view(avail: &[(u32, f64)]) -> ResourceView {
        ResourceView {
            available: avail.iter().map(|&(m, a)| (MachineId(m), a)).collect(),
            capacity: avail.iter().map(|&(m, _)| (MachineId(m), 8.0)).collect(),
        }
    }

    #[test]
    fn co_located_granules_share_subset() {
        let p = pool(vec![
            entry(0, HALF, &[(1, HALF)]),
            entry(1, HALF, &[(1, HALF)]),
            entry(2, GB, &[(1, GB)]),
        ]);
        assert_eq!(p.gr_max(), 2 * GB);
        let s = group_granules(&p);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].bytes, 2 * GB);
    }

    #[test]
    fn max_input_caps_subsets() {
        let mut p = pool((0..10).map(|i| entry(i, HALF, &[(i % 5, HALF)])).collect());
        p.max_input_per_task = Some(GB);
        let s = group_granules(&p);
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|s| s.bytes == GB));
    }

    #[test]
    fn conflicts_separate() {
        let mut p = pool(vec![entry(0, HALF, &[(1, HALF)]), entry(1, HALF, &[(1, HALF)])]);
        p.add_conflict(stage().granule(1), stage().granule(0));
        assert_eq!(group_granules(&p).len(), 2);
    }

    #[test]
    fn troublesome_form_one_subset() {
        let mut p = pool((0..3).map(|i| entry(i, GB, &[(i, GB)])).collect());
        p.troublesome.insert(stage().granule(0));
        p.troublesome.insert(stage().granule(2));
        let s = group_granules(&p);
        let t: Vec<&Subset> = s.iter().filter(|s| s.troublesome).collect();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].granules.len(), 2);
    }

    #[test]
    fn preferred_machine_rules() {
        let p = pool(vec![
            entry(0, GB, &[(3, GB)]),
            entry(1, GB, &[(1, 7 * GB / 10), (2, 3 * GB / 10)]),
        ]);
        let subsets = vec![
            Subset {
                granules: vec![stage().granule(0)],
                bytes: GB,
                troublesome: false,
                logic_id: "default".into(),
            },
            Subset {
                granules: vec![stage().granule(1)],
                bytes: GB,
                troublesome: false,
                logic_id: "default".into(),
            },
            Subset {
                granules: vec![stage().granule(0)],
                bytes: GB,
                troublesome: true,
                logic_id: "default".into(),
            },
        ];
        assert_eq!(
            preferred_machines(&subsets, &p),
            vec![Some(MachineId(3)), Some(MachineId(1)), None]
        );
    }

    fn subset(bytes: u64) -> Subset {
        Subset {
            granules: vec![stage().granule(0)],
            bytes,
            troublesome: false,
            logic_id: "default".into(),
        }
    }

    #[test]
    fn altruistic_examples() {
        let mut next = 0;
        let a = altruistic_allocation(
            &[subset(2 * GB), subset(4 * GB)],
            &[Some(MachineId(1)), Some(MachineId(2))],
            &view(&[(1, 8.0), (2, 8.0)]),
            AllocParams::default(),
            &mut next,
        )
        .unwrap();
        let r: Vec<f64> = a.assignments.iter().map(|t| t.resources).collect();
        assert_eq!(r, vec![4.0, 8.0]);

        let a = altruistic_allocation(
            &[subset(GB)],
            &[Some(MachineId(0))],
            &view(&[(0, 10.0)]),
            AllocParams::default(),
            &mut next,
        )
        .unwrap();
        assert_eq!(a.assignments[0].resources, 10.0);

        let a = altruistic_allocation(
            &[subset(GB), subset(GB)],
            &[Some(MachineId(1)), Some(MachineId(1))],
            &view(&[(1, 3.0)]),
            AllocParams::default(),
            &mut next,
        )
        .unwrap();
        assert!(a.assignments.iter().all(|t| t.resources == 1.5));
        assert_eq!(next, 5);
    }

    #[test]
    fn zero_availability_defers() {
        let mut next = 0;
        let a = altruistic_allocation(
            &[subset(GB), subset(GB)],
            &[Some(MachineId(0)), Some(MachineId(1))],
            &view(&[(0, 0.0), (1, 2.0)]),
            AllocParams::default(),
            &mut next,
        )
        .unwrap();
        assert_eq!(a.deferred, vec![0]);
        assert_eq!(a.assignments.len(), 1);
        let err = altruistic_allocation(
            &[subset(GB)],
            &[Some(MachineId(0))],
            &view(&[(0, 0.0)]),
            AllocParams::default(),
            &mut next,
        );
        assert_eq!(err, Err(ExecError::AllDeferred));
    }

    #[test]
    fn happy_path_schedules_everything() {
        let mut p = pool((0..4).map(|i| entry(i, GB, &[(i, GB)])).collect());
        let mut next = 0;
        let out = schedule_iteration(
            &mut p,
            &view(&[(0, 4.0), (1, 4.0), (2, 4.0), (3, 4.0)]),
            AllocParams::default(),
            3,
            &mut next,
        );
        // singleton leftovers on different machines pair up under GrMax = 2 GB
        assert_eq!(out.len(), 2);
        assert_eq!(out.iter().map(|t| t.granules.len()).sum::<usize>(), 4);
        assert!(p.is_empty());
        assert!(p.conflicts.is_empty());
    }

    #[test]
    fn saturated_machine_goes_troublesome_then_remote() {
        let mut p = pool(vec![entry(0, GB, &[(1, GB)])]);
        let v = view(&[(0, 2.0), (1, 0.0), (2, 5.0)]);
        let mut next = 0;
        for _ in 0..3 {
            assert!(schedule_iteration(&mut p, &v, AllocParams::default(), 3, &mut next).is_empty());
        }
        assert!(p.troublesome.contains(&stage().granule(0)));
        let out = schedule_iteration(&mut p, &v, AllocParams::default(), 3, &mut next);
        assert_eq!(out[0].machine, MachineId(2));
    }

    #[test]
    fn deferred_pairs_become_conflicts() {
        let mut p = pool(vec![entry(0, HALF, &[(1, HALF)]), entry(1, HALF, &[(1, HALF)])]);
        let v = view(&[(1, 0.0)]);
        let mut next = 0;
        for _ in 0..3 {
            schedule_iteration(&mut p, &v, AllocParams::default(), 3, &mut next);
        }
        assert!(p.conflicting(stage().granule(0), stage().granule(1)));
    }

    #[test]
    fn ignore_rules_drop_two_of_eight() {
        let mut p = pool((0..8).map(|i| entry(i, GB, &[(i % 4, GB)])).collect());
        let rules = vec![StatusRule {
            counter_id: "rare".into(),
            op: CmpOp::Eq,
            threshold: 0,
            decision: StatusDecision::Ignore,
        }];
        for i in 0..8u32 {
            let mut stats = GranuleStats::default();
            stats
                .custom_counters
                .insert("rare".into(), if i == 2 || i == 5 { 0 } else { 3 });
            let d = evaluate_rules(&rules, &stats);
            apply_status_decision(&mut p, stage().granule(i), &d).unwrap();
        }
        assert_eq!(p.len(), 6);
        let mut next = 0;
        let v = view(&[(0, 8.0), (1, 8.0), (2, 8.0), (3, 8.0)]);
        let mut tasks = Vec::new();
        // one granule per task
        p.max_input_per_task = Some(GB);
        while !p.is_empty() {
            tasks.extend(schedule_iteration(&mut p, &v, AllocParams::default(), 3, &mut next));
        }
        assert_eq!(tasks.len(), 6);
    }

    #[test]
    fn replace_and_identity_decisions() {
        let mut p = pool(vec![entry(0, GB, &[(0, GB)])]);
        let before = p.clone();
        apply_status_decision(&mut p, stage().granule(0), &StatusDecision::NoNewAction).unwrap();
        assert_eq!(p, before);
        apply_status_decision(&mut p, stage().granule(0), &StatusDecision::Replace("hash_join".into())).unwrap();
        let mut next = 0;
        let out = schedule_iteration(&mut p, &view(&[(0, 1.0)]), AllocParams::default(), 3, &mut next);
        assert_eq!(out[0].logic_id, "hash_join");
        assert_eq!(
            apply_status_decision(&mut p, stage().granule(7), &StatusDecision::Ignore),
            Err(ExecError::UnknownGranule(stage().granule(7)))
        );
    }

    #[test]
    fn straggler_detection() {
        let t = |i| TaskId(i);
        assert_eq!(
            detect_stragglers(&[(t(1), 1.0), (t(2), 1.0), (t(3), 0.2)], 0.5),
            vec![t(3)]
        );
        assert!(detect_stragglers(&[(t(1), 1.0), (t(2), 0.9)], 0.5).is_empty());
        assert!(detect_stragglers(&[(t(1), 0.1)], 0.5).is_empty());
    }

    #[test]
    fn straggler_split() {
        let g: Vec<GranuleId> = (0..4).map(|i| stage().granule(i)).collect();
        assert_eq!(split_straggler(&g[..2], 0.5).unwrap(), (vec![g[0]], vec![g[1]]));
        let (k, r) = split_straggler(&g, 0.25).unwrap();
        assert_eq!((k.len(), r.len()), (1, 3));
        assert_eq!(split_straggler(&g[..1], 0.5), Err(ExecError::NothingToSplit));
    }

    proptest::proptest! {
        #[test]
        fn grouping_invariants(sizes in proptest::collection::vec((1u64..50, 0u32..4, 0u32..4), 1..30), conflicts in proptest::collection::vec((0usize..30, 0usize..30), 0..10)) {
            let entries: Vec<ReadyEntry> = sizes.iter().enumerate().map(|(i, &(b, m1, m2))| {
                let mut locs = vec![(m1, b)];
                if m2 != m1 { locs.push((m2, b / 2)); }
                entry(i as u32, b + if m2 != m1 { b / 2 } else { 0 }, &locs)
            }).collect();
            let mut p = pool(entries);
            for (a, b) in conflicts {
                if a < sizes.len() && b < sizes.len() {
                    p.add_conflict(stage().granule(a as u32), stage().granule(b as u32));
                }
            }
            let subsets = group_granules(&p);
            let cap = p.gr_max();
            let mut seen = BTreeSet::new();
            for s in &subsets {
                proptest::prop_assert!(s.bytes <= cap);
                for (n, a) in s.granules.iter().enumerate() {
                    proptest::prop_assert!(seen.insert(*a));
                    for b in &s.granules[n + 1..] {
                        proptest::prop_assert!(!p.conflicting(*a, *b));
                    }
                }
            }
            proptest::prop_assert_eq!(seen.len(), sizes.len());
        }

        #[test]
        fn allocation_is_proportional_and_conserving(sizes in proptest::collection::vec((1u64..40, 0u32..3), 1..10), avail in proptest::collection::vec(0.5f64..8.0, 3)) {
            let subsets: Vec<Subset> = sizes.iter().map(|&(b, _)| subset(b * GB / 10)).collect();
            let choices: Vec<Option<MachineId>> = sizes.iter().map(|&(_, m)| Some(MachineId(m))).collect();
            let v = view(&[(0, avail[0]), (1, avail[1]), (2, avail[2])]);
            let mut next = 0;
            let a = altruistic_allocation(&subsets, &choices, &v, AllocParams::default(), &mut next).unwrap();
            let f0 = a.assignments[0].resources / a.assignments[0].input_bytes as f64;
            let mut used: BTreeMap<MachineId, f64> = BTreeMap::new();
            for t in &a.assignments {
                proptest::prop_assert!((t.resources / t.input_bytes as f64 - f0).abs() <= 1e-9 * f0);
                *used.entry(t.machine).or_default() += t.resources;
            }
            for (m, u) in used {
                proptest::prop_assert!(u <= v.available(m) * (1.0 + 1e-9));
            }
        }
    }
}
