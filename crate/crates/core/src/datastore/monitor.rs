use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datastore::{Granule, Record};
use crate::model::CmpOp;

/// A data monitor attached to a stage. Built-in statistics (size, pairs,
/// growth) are always collected; `value_threshold` counts records whose value
/// compares against a constant, one O(1) update per record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MonitorSpec {
    Builtin,
    ValueThreshold {
        counter_id: String,
        op: CmpOp,
        threshold: i64,
    },
}

/// Runs the stage's custom monitors over a batch of new records for one
/// granule and returns the per-counter increments.
pub fn run_monitors(granule: &mut Granule, monitors: &[MonitorSpec], records: &[Record]) -> BTreeMap<String, i64> {
    let mut deltas = BTreeMap::new();
    for m in monitors {
        if let MonitorSpec::ValueThreshold {
            counter_id,
            op,
            threshold,
        } = m
        {
            let hits = records.iter().filter(|r| op.holds(r.value as i64, *threshold)).count() as i64;
            *granule.stats.custom_counters.entry(counter_id.clone()).or_insert(0) += hits;
            *deltas.entry(counter_id.clone()).or_insert(0) += hits;
        }
    }
    deltas
}
