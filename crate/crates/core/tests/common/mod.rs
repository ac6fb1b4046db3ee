//! Independent trace walkers used as oracles by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use granary_core::sim::Trace;
use granary_core::triggers::TriggerSpec;
use granary_core::{EventKind, GranuleId, MachineId, StageKey, StatusDecision, Workload};

fn stage_key(w: &Workload, job: &str, stage: &str) -> Option<StageKey> {
    let j = w.jobs.iter().position(|x| x.id == job)?;
    let s = w.jobs[j].stages.iter().position(|x| x.stage_id == stage)?;
    Some(StageKey::new(j as u32, s as u32))
}

/// Producer → consumers per stage, read from the workload spec.
fn consumers(w: &Workload) -> BTreeMap<StageKey, Vec<StageKey>> {
    let mut out = BTreeMap::new();
    for job in &w.jobs {
        for [a, b] in &job.edges {
            let (pa, pb) = (stage_key(w, &job.id, a).unwrap(), stage_key(w, &job.id, b).unwrap());
            out.entry(pa).or_insert_with(Vec::new).push(pb);
        }
    }
    out
}

fn trigger(w: &Workload, s: StageKey) -> &TriggerSpec {
    &w.jobs[s.job as usize].stages[s.stage as usize].trigger
}

/// Checks the data-driven protocol ordering and task coverage for every
/// producer stage. Returns a list of violations.
pub fn protocol_violations(w: &Workload, trace: &Trace) -> Vec<String> {
    let mut bad = Vec::new();
    let mut ready: BTreeMap<StageKey, Vec<(usize, GranuleId, u64)>> = BTreeMap::new();
    let mut generated: BTreeMap<StageKey, Vec<usize>> = BTreeMap::new();
    let mut ready_all: BTreeMap<StageKey, Vec<usize>> = BTreeMap::new();
    let mut ignored: BTreeSet<(GranuleId, StageKey)> = BTreeSet::new();
    let mut covered: BTreeMap<(GranuleId, StageKey), u32> = BTreeMap::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, e) in trace.events.iter().enumerate() {
        if e.timestamp < last_t {
            bad.push(format!("clock went backwards at seq {}", e.seq));
        }
        last_t = e.timestamp;
        if e.seq != i as u64 {
            bad.push(format!("seq gap at {i}"));
        }
        match &e.kind {
            EventKind::DataReady { granule, records, .. } => ready
                .entry(granule.stage_key())
                .or_default()
                .push((i, *granule, *records)),
            EventKind::DataGenerated { stage } => generated.entry(*stage).or_default().push(i),
            EventKind::DataReadyAll { stage } => ready_all.entry(*stage).or_default().push(i),
            EventKind::StatusDecision {
                granule,
                consumer,
                decision: StatusDecision::Ignore,
            } => {
                ignored.insert((*granule, *consumer));
            }
            EventKind::TaskCompleted { stage, granules, .. } | EventKind::TaskKilled { stage, granules, .. } => {
                for g in granules {
                    *covered.entry((*g, *stage)).or_default() += 1;
                }
            }
            _ => {}
        }
    }
    for (producer, cons) in consumers(w) {
        let all = ready_all.get(&producer).cloned().unwrap_or_default();
        if all.len() != 1 {
            bad.push(format!("{producer}: {} data_ready_all events", all.len()));
            continue;
        }
        let at = all[0];
        match generated.get(&producer).map(Vec::as_slice) {
            Some([g]) if *g < at => {}
            other => bad.push(format!(
                "{producer}: data_generated {other:?} vs data_ready_all at {at}"
            )),
        }
        let readies = ready.get(&producer).cloned().unwrap_or_default();
        if let Some(late) = readies.iter().find(|r| r.0 > at) {
            bad.push(format!("{producer}: data_ready for {} after data_ready_all", late.1));
        }
        let handed: BTreeSet<GranuleId> = readies.iter().filter(|r| r.2 > 0).map(|r| r.1).collect();
        let batch = trigger(w, producer).is_batch();
        for &c in &cons {
            for &g in &handed {
                let n = covered.get(&(g, c)).copied().unwrap_or(0);
                let skip = ignored.contains(&(g, c));
                let ok = match (skip, batch) {
                    (true, _) => n == 0,
                    (false, true) => n == 1,
                    (false, false) => n >= 1,
                };
                if !ok {
                    bad.push(format!("{g} covered {n} times by {c} (ignored: {skip})"));
                }
            }
            for ((g, cs), n) in &covered {
                if *cs == c && g.stage_key() == producer && !handed.contains(g) {
                    bad.push(format!("{g} covered {n} times by {c} without being ready"));
                }
            }
        }
    }
    bad
}

/// Output bytes spilled per stage.
pub fn spilled_bytes(trace: &Trace) -> BTreeMap<StageKey, u64> {
    let mut out = BTreeMap::new();
    for e in &trace.events {
        if let EventKind::DataSpill { stage, bytes, .. } = e.kind {
            *out.entry(stage).or_default() += bytes;
        }
    }
    out
}

/// Bytes processed per stage by completed and killed tasks.
pub fn processed_bytes(trace: &Trace) -> BTreeMap<StageKey, u64> {
    let mut out = BTreeMap::new();
    for e in &trace.events {
        match e.kind {
            EventKind::TaskCompleted {
                stage, processed_bytes, ..
            }
            | EventKind::TaskKilled {
                stage, processed_bytes, ..
            } => {
                *out.entry(stage).or_default() += processed_bytes;
            }
            _ => {}
        }
    }
    out
}

/// Bytes of granules a consumer stage chose to ignore.
pub fn ignored_bytes(trace: &Trace) -> BTreeMap<StageKey, u64> {
    let mut queried: BTreeMap<(GranuleId, StageKey), u64> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for e in &trace.events {
        match &e.kind {
            EventKind::StatusQuery {
                granule,
                consumer,
                stats,
            } => {
                queried.insert((*granule, *consumer), stats.bytes);
            }
            EventKind::StatusDecision {
                granule,
                consumer,
                decision: StatusDecision::Ignore,
            } => *out.entry(*consumer).or_default() += queried[&(*granule, *consumer)],
            _ => {}
        }
    }
    out
}

/// Byte accounting: spills match the data models; non-pipelined consumers
/// process what their producers emitted minus what they ignored.
pub fn conservation_violations(w: &Workload, trace: &Trace) -> Vec<String> {
    let mut bad = Vec::new();
    let spilled = spilled_bytes(trace);
    let processed = processed_bytes(trace);
    let ignored = ignored_bytes(trace);
    let cons = consumers(w);
    for (j, job) in w.jobs.iter().enumerate() {
        for (s, st) in job.stages.iter().enumerate() {
            let key = StageKey::new(j as u32, s as u32);
            let declared = st.output.total_output_bytes();
            let got = spilled.get(&key).copied().unwrap_or(0);
            if got != declared {
                bad.push(format!("{key}: spilled {got} of {declared}"));
            }
            let producers: Vec<StageKey> = cons
                .iter()
                .filter(|(_, cs)| cs.contains(&key))
                .map(|(p, _)| *p)
                .collect();
            if producers.is_empty()
                || producers
                    .iter()
                    .any(|p| matches!(trigger(w, *p), TriggerSpec::Pipelining { .. }))
            {
                continue;
            }
            let input: u64 = producers.iter().map(|p| spilled.get(p).copied().unwrap_or(0)).sum();
            let want = input - ignored.get(&key).copied().unwrap_or(0);
            let got = processed.get(&key).copied().unwrap_or(0);
            if got != want {
                bad.push(format!("{key}: processed {got}, expected {want}"));
            }
        }
    }
    bad
}

/// Largest excess of a job's stored bytes on one machine over its current
/// quota plus its largest single spill, across all trace timestamps.
/// Non-positive means the quota held.
pub fn worst_quota_excess(trace: &Trace) -> i128 {
    let mut quota: BTreeMap<u32, u64> = BTreeMap::new();
    let mut spill: BTreeMap<u32, u64> = BTreeMap::new();
    for e in &trace.events {
        if let EventKind::DataSpill { stage, bytes, .. } = e.kind {
            let s = spill.entry(stage.job).or_default();
            *s = (*s).max(bytes);
        }
    }
    let mut stored: BTreeMap<(u32, MachineId), u64> = BTreeMap::new();
    let mut worst = i128::MIN;
    for e in &trace.events {
        match &e.kind {
            EventKind::QuotaAssigned { job, bytes } => {
                quota.insert(*job, *bytes);
            }
            EventKind::Stored {
                granule,
                machine,
                bytes,
                ..
            } => {
                let s = stored.entry((granule.job, *machine)).or_default();
                *s += bytes;
                let limit =
                    quota.get(&granule.job).copied().unwrap_or(0) + spill.get(&granule.job).copied().unwrap_or(0);
                worst = worst.max(*s as i128 - limit as i128);
            }
            EventKind::DataLost {
                granule,
                machine,
                bytes,
            } => {
                if let Some(s) = stored.get_mut(&(granule.job, *machine)) {
                    *s = s.saturating_sub(*bytes);
                }
            }
            EventKind::JobCompleted { job } => stored.retain(|k, _| k.0 != *job),
            _ => {}
        }
    }
    worst
}

/// Time of the first task launched for `stage`.
pub fn first_launch(trace: &Trace, stage: StageKey) -> Option<f64> {
    trace.events.iter().find_map(|e| match e.kind {
        EventKind::TaskLaunched { stage: s, .. } if s == stage => Some(e.timestamp),
        _ => None,
    })
}
