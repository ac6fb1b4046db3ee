//! Runtime relief of quota pressure: find pressured machines, pick their hot
//! granules, close them and direct future bytes elsewhere.

use std::collections::{BTreeMap, BTreeSet};

use crate::datastore::{select_machines_excluding, GranuleCatalog, QuotaTable, StageContext};
use crate::model::{ClusterState, GranuleId, MachineId, Seconds, StageKey};

/// Live machines where `job` stores at least the pressure threshold of its
/// quota, most used first (ties by machine id).
pub fn at_risk_machines(job: u32, cluster: &ClusterState, quota: &QuotaTable) -> Vec<MachineId> {
    let limit = quota.pressure_threshold * quota.quota(job) as f64;
    let mut out: Vec<(std::cmp::Reverse<u64>, MachineId)> = cluster
        .alive()
        .filter(|m| m.stored_for(job) > 0 && m.stored_for(job) as f64 >= limit)
        .map(|m| (std::cmp::Reverse(m.stored_for(job)), m.machine_id))
        .collect();
    out.sort_unstable();
    out.into_iter().map(|(_, m)| m).collect()
}

/// Open granules of `job` on `machine` whose bytes there or whose growth rate
/// exceed mean + one standard deviation of the job's open granules on that
/// machine. Falls back to the single largest (lowest id on ties).
pub fn select_hot_granules(job: u32, machine: MachineId, catalog: &GranuleCatalog) -> Vec<GranuleId> {
    let candidates: Vec<(GranuleId, f64, f64)> = catalog
        .job_granules(job)
        .filter(|g| g.open_machine() == Some(machine))
        .map(|g| (g.id, g.bytes_on(machine) as f64, g.stats.growth_rate))
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let cutoff = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        mean + var.sqrt()
    };
    let size_cut = cutoff(&mut candidates.iter().map(|c| c.1));
    let rate_cut = cutoff(&mut candidates.iter().map(|c| c.2));
    let mut hot: Vec<GranuleId> = candidates
        .iter()
        .filter(|c| c.1 > size_cut || c.2 > rate_cut)
        .map(|c| c.0)
        .collect();
    if hot.is_empty() {
        let largest = candidates
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        hot.push(largest.0);
    }
    hot.sort_unstable();
    hot
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RespreadOutcome {
    /// Newly opened target per granule.
    pub placed: Vec<(GranuleId, MachineId)>,
    /// Granules left closed with no open target; retried later.
    pub deferred: Vec<GranuleId>,
    /// (granule, machine) materializations closed by this call.
    pub closed: Vec<(GranuleId, MachineId)>,
}

/// Closes the open materialization of every hot granule and, per producing
/// stage, asks the machine selector for one new machine shared by the group.
/// Existing bytes stay where they are.
pub fn close_and_respread(
    hot: &[GranuleId],
    catalog: &mut GranuleCatalog,
    cluster: &ClusterState,
    quota: &QuotaTable,
    contexts: &BTreeMap<StageKey, StageContext>,
    now: Seconds,
) -> RespreadOutcome {
    let mut out = RespreadOutcome::default();
    let mut groups: BTreeMap<StageKey, Vec<GranuleId>> = BTreeMap::new();
    for &id in hot {
        if let Some(m) = catalog.close(id, now) {
            out.closed.push((id, m));
        }
        groups.entry(id.stage_key()).or_default().push(id);
    }
    for (stage, ids) in groups {
        let (placed, deferred) = respread_group(stage, &ids, catalog, cluster, quota, contexts);
        out.placed.extend(placed);
        out.deferred.extend(deferred);
    }
    out
}

/// Finds one new machine for a group of closed granules of one stage.
pub(crate) fn respread_group(
    stage: StageKey,
    ids: &[GranuleId],
    catalog: &mut GranuleCatalog,
    cluster: &ClusterState,
    quota: &QuotaTable,
    contexts: &BTreeMap<StageKey, StageContext>,
) -> (Vec<(GranuleId, MachineId)>, Vec<GranuleId>) {
    let fallback = StageContext::root(stage);
    let ctx = contexts.get(&stage).unwrap_or(&fallback);
    let exclude: BTreeSet<MachineId> = ids
        .iter()
        .flat_map(|id| catalog.granule(*id).materializations.iter().map(|m| m.machine))
        .collect();
    match select_machines_excluding(ctx, 1, cluster, catalog, quota, &exclude) {
        Ok(picked) if !picked.is_empty() => {
            let m = picked[0];
            for &id in ids {
                catalog.granule_mut(id).open_target = Some(m);
            }
            (ids.iter().map(|&id| (id, m)).collect(), Vec::new())
        }
        _ => {
            for &id in ids {
                catalog.granule_mut(id).open_target = None;
            }
            (Vec::new(), ids.to_vec())
        }
    }
}
