//! Per-stage ready triggers: decide when granules may be consumed, emit
//! `DataReady` / `DataReadyAll`, and account for pipelined write-backs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::Granule;
use crate::model::{Aggregate, ComputeType, EventKind, StageKey};

/// Default record threshold for streaming triggers.
pub const DEFAULT_STREAMING_X: u64 = 100;

fn default_x() -> u64 {
    DEFAULT_STREAMING_X
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerSpec {
    /// Barrier: everything is ready once the producer is done.
    #[default]
    DefaultBatch,
    /// A granule is ready once it holds at least `x` unconsumed records.
    DefaultStreaming {
        #[serde(default = "default_x")]
        x: u64,
    },
    /// Like streaming, for a commutative+associative consumer that writes its
    /// partial result back into the same granule.
    Pipelining { x: u64 },
    /// All granules become ready each time the stage-wide sum of a custom
    /// counter grows by `threshold`.
    CustomCounter { counter_id: String, threshold: i64 },
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            TriggerSpec::DefaultStreaming { x } | TriggerSpec::Pipelining { x } if *x == 0 => {
                Err("trigger threshold x must be >= 1".into())
            }
            TriggerSpec::CustomCounter { threshold, .. } if *threshold < 1 => {
                Err("custom counter threshold must be >= 1".into())
            }
            _ => Ok(()),
        }
    }

    pub fn is_batch(&self) -> bool {
        matches!(self, TriggerSpec::DefaultBatch)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TriggerError {
    #[error("stage {0} already reported data_generated")]
    DuplicateDataGenerated(StageKey),
    #[error("write-back requires a commutative+associative consumer")]
    NotCommutativeAssociative,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageProgress {
    pub stage: StageKey,
    pub granules_ready_sent: BTreeSet<u32>,
    pub producer_done: bool,
    pub ready_all_sent: bool,
    /// Stage-wide sum of the custom trigger counter.
    pub counter_total: i64,
    /// Value of `counter_total` at the last custom-trigger firing.
    pub counter_fired_at: i64,
    /// Granules whose final flush waits on a running pipelined consumption.
    pub pending_final: BTreeSet<u32>,
}

impl StageProgress {
    pub fn new(stage: StageKey) -> Self {
        Self {
            stage,
            granules_ready_sent: BTreeSet::new(),
            producer_done: false,
            ready_all_sent: false,
            counter_total: 0,
            counter_fired_at: 0,
            pending_final: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fire {
    No,
    Granule,
    AllGranules,
}

/// Pure trigger predicate for one granule.
pub fn evaluate(trigger: &TriggerSpec, granule: &Granule, progress: &StageProgress) -> Fire {
    match trigger {
        TriggerSpec::DefaultBatch => {
            if progress.producer_done {
                Fire::AllGranules
            } else {
                Fire::No
            }
        }
        TriggerSpec::DefaultStreaming { x } | TriggerSpec::Pipelining { x } => {
            if !granule.in_flight && granule.unconsumed.records >= *x {
                Fire::Granule
            } else {
                Fire::No
            }
        }
        TriggerSpec::CustomCounter { threshold, .. } => {
            if progress.counter_total - progress.counter_fired_at >= *threshold {
                Fire::AllGranules
            } else {
                Fire::No
            }
        }
    }
}

/// Records a consumer takes from a granule at task launch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Unconsumed {
    pub records: u64,
    pub bytes: u64,
    pub agg: Aggregate,
}

/// Hands every unconsumed record of `granule` to a consumer.
pub fn consume(granule: &mut Granule) -> Unconsumed {
    granule.in_flight = false;
    granule.outstanding += 1;
    std::mem::take(&mut granule.unconsumed)
}

/// Folds a pipelined partial result back into the granule as one aggregate
/// record. Storage of the bytes is the caller's job.
pub fn pipeline_writeback(
    granule: &mut Granule,
    consumer: ComputeType,
    partial: Aggregate,
    partial_result_bytes: u64,
) -> Result<(), TriggerError> {
    if consumer != ComputeType::StatefulCa {
        return Err(TriggerError::NotCommutativeAssociative);
    }
    granule.outstanding = granule.outstanding.saturating_sub(1);
    granule.unconsumed.records += 1;
    granule.unconsumed.bytes += partial_result_bytes;
    granule.unconsumed.agg = granule.unconsumed.agg.merge(partial);
    Ok(())
}

/// The ready-trigger state machine of one stage.
#[derive(Clone, Debug)]
pub struct StageMaster {
    pub trigger: TriggerSpec,
    pub consumers: Vec<StageKey>,
    pub progress: StageProgress,
}

impl StageMaster {
    pub fn new(stage: StageKey, trigger: TriggerSpec, consumers: Vec<StageKey>) -> Self {
        Self {
            trigger,
            consumers,
            progress: StageProgress::new(stage),
        }
    }

    fn ready_event(&mut self, g: &mut Granule) -> EventKind {
        let records = g.unconsumed.records;
        if records > 0 && !self.consumers.is_empty() {
            g.in_flight = true;
        }
        self.progress.granules_ready_sent.insert(g.id.index);
        EventKind::DataReady {
            granule: g.id,
            consumers: self.consumers.clone(),
            machines: g.machines(),
            records,
            stats: g.stats.clone(),
        }
    }

    /// Re-evaluates the trigger after granules in `touched` received data.
    pub fn after_ingest(&mut self, granules: &mut [Granule], touched: &[u32], counter_delta: i64) -> Vec<EventKind> {
        let mut out = Vec::new();
        if self.consumers.is_empty() || self.progress.producer_done {
            return out;
        }
        match &self.trigger {
            TriggerSpec::DefaultBatch => {}
            TriggerSpec::DefaultStreaming { .. } | TriggerSpec::Pipelining { .. } => {
                for &i in touched {
                    let g = &mut granules[i as usize];
                    if evaluate(&self.trigger, g, &self.progress) == Fire::Granule {
                        out.push(self.ready_event(g));
                    }
                }
            }
            TriggerSpec::CustomCounter { .. } => {
                self.progress.counter_total += counter_delta;
                let probe = &granules[0];
                if evaluate(&self.trigger, probe, &self.progress) == Fire::AllGranules {
                    self.progress.counter_fired_at = self.progress.counter_total;
                    for g in granules.iter_mut() {
                        if !g.in_flight && g.unconsumed.records > 0 {
                            out.push(self.ready_event(g));
                        }
                    }
                }
            }
        }
        out
    }

    /// A pipelined consumption finished and wrote back. Re-arms the granule
    /// and, after the producer is done, emits its deferred final flush.
    pub fn after_writeback(&mut self, granules: &mut [Granule], index: u32) -> Vec<EventKind> {
        let mut out = Vec::new();
        let g = &mut granules[index as usize];
        if self.progress.producer_done {
            if g.outstanding == 0 && self.progress.pending_final.remove(&index) {
                out.push(self.ready_event(g));
            }
            out.extend(self.maybe_ready_all());
        } else if evaluate(&self.trigger, g, &self.progress) == Fire::Granule {
            out.push(self.ready_event(g));
        }
        out
    }

    /// A non-pipelined consumption of `index` completed.
    pub fn after_consumed(&mut self, granules: &mut [Granule], index: u32) -> Vec<EventKind> {
        let g = &mut granules[index as usize];
        g.outstanding = g.outstanding.saturating_sub(1);
        if !self.progress.producer_done && evaluate(&self.trigger, g, &self.progress) == Fire::Granule {
            return vec![self.ready_event(g)];
        }
        Vec::new()
    }

    /// Final flush: a `DataReady` for every granule not yet fully handed over,
    /// then exactly one `DataReadyAll` once nothing is pending.
    pub fn on_data_generated(&mut self, granules: &mut [Granule]) -> Result<Vec<EventKind>, TriggerError> {
        if self.progress.producer_done {
            return Err(TriggerError::DuplicateDataGenerated(self.progress.stage));
        }
        self.progress.producer_done = true;
        let pipelined = matches!(self.trigger, TriggerSpec::Pipelining { .. });
        let mut out = Vec::new();
        for g in granules.iter_mut() {
            let idx = g.id.index;
            if pipelined && g.outstanding > 0 {
                self.progress.pending_final.insert(idx);
                continue;
            }
            let never_sent = !self.progress.granules_ready_sent.contains(&idx);
            if never_sent || (g.unconsumed.records > 0 && !g.in_flight) {
                out.push(self.ready_event(g));
            }
        }
        out.extend(self.maybe_ready_all());
        Ok(out)
    }

    fn maybe_ready_all(&mut self) -> Option<EventKind> {
        if self.progress.ready_all_sent || !self.progress.pending_final.is_empty() {
            return None;
        }
        self.progress.ready_all_sent = true;
        Some(EventKind::DataReadyAll {
            stage: self.progress.stage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::Granule;
    use crate::model::{GranuleId, KEY_SPACE};

    fn granule(index: u32, records: u64) -> Granule {
        let mut g = Granule::new(
            GranuleId {
                job: 0,
                stage: 0,
                index,
            },
            4,
            KEY_SPACE,
        );
        g.unconsumed.records = records;
        g.unconsumed.bytes = records * 10;
        g.unconsumed.agg = Aggregate {
            count: records,
            sum: records,
        };
        g
    }

    fn master(trigger: TriggerSpec) -> StageMaster {
        StageMaster::new(StageKey::new(0, 0), trigger, vec![StageKey::new(0, 1)])
    }

    #[test]
    fn batch_waits_for_producer() {
        let m = master(TriggerSpec::DefaultBatch);
        assert_eq!(evaluate(&m.trigger, &granule(0, 500), &m.progress), Fire::No);
    }

    #[test]
    fn streaming_fires_at_x() {
        let m = master(TriggerSpec::DefaultStreaming { x: 100 });
        assert_eq!(evaluate(&m.trigger, &granule(0, 99), &m.progress), Fire::No);
        assert_eq!(evaluate(&m.trigger, &granule(0, 100), &m.progress), Fire::Granule);
    }

    #[test]
    fn custom_counter_marks_all_granules() {
        let mut m = master(TriggerSpec::CustomCounter {
            counter_id: "distinct".into(),
            threshold: 100,
        });
        let mut gs: Vec<_> = (0..4).map(|i| granule(i, 5)).collect();
        assert!(m.after_ingest(&mut gs, &[0], 60).is_empty());
        let ev = m.after_ingest(&mut gs, &[1], 40);
        assert_eq!(ev.len(), 4);
        assert!(gs.iter().all(|g| g.in_flight));
        // another 99 does not refire
        for g in gs.iter_mut() {
            consume(g);
            g.unconsumed.records = 1;
        }
        assert!(m.after_ingest(&mut gs, &[2], 99).is_empty());
        assert_eq!(m.after_ingest(&mut gs, &[2], 1).len(), 4);
    }

    #[test]
    fn final_flush_for_residuals() {
        let x = 100;
        let mut m = StageMaster::new(
            StageKey::new(0, 0),
            TriggerSpec::Pipelining { x },
            vec![StageKey::new(0, 1)],
        );
        let mut gs: Vec<_> = (0..3).map(|i| granule(i, x / 2)).collect();
        let ev = m.on_data_generated(&mut gs).unwrap();
        let ready = ev.iter().filter(|e| matches!(e, EventKind::DataReady { .. })).count();
        assert_eq!(ready, 3);
        assert!(matches!(ev.last(), Some(EventKind::DataReadyAll { .. })));
        assert_eq!(ev.len(), 4);
    }

    #[test]
    fn flushed_batch_stage_sends_only_ready_all() {
        let mut m = master(TriggerSpec::DefaultBatch);
        let mut gs: Vec<_> = (0..3).map(|i| granule(i, 0)).collect();
        for i in 0..3 {
            m.progress.granules_ready_sent.insert(i);
        }
        let ev = m.on_data_generated(&mut gs).unwrap();
        assert_eq!(ev.len(), 1);
        assert!(matches!(ev[0], EventKind::DataReadyAll { .. }));
    }

    #[test]
    fn duplicate_data_generated() {
        let mut m = master(TriggerSpec::DefaultBatch);
        let mut gs = vec![granule(0, 1)];
        m.on_data_generated(&mut gs).unwrap();
        assert_eq!(
            m.on_data_generated(&mut gs).unwrap_err(),
            TriggerError::DuplicateDataGenerated(StageKey::new(0, 0))
        );
    }

    #[test]
    fn writeback_leaves_one_record() {
        let mut g = granule(0, 150);
        let taken = consume(&mut g);
        assert_eq!(taken.records, 150);
        pipeline_writeback(&mut g, ComputeType::StatefulCa, taken.agg, 10).unwrap();
        assert_eq!(g.unconsumed.records, 1);
        assert_eq!(g.unconsumed.agg.count, 150);
    }

    #[test]
    fn writeback_rejects_stateless() {
        let mut g = granule(0, 10);
        consume(&mut g);
        assert_eq!(
            pipeline_writeback(&mut g, ComputeType::Stateless, Aggregate::default(), 1),
            Err(TriggerError::NotCommutativeAssociative)
        );
    }

    #[test]
    fn repeated_pipelined_folds_match_single_pass() {
        // Oracle: one-pass count and sum over the same record stream.
        let values: Vec<u64> = (0..1000).map(|i| (i * 37 + 11) % 1024).collect();
        let oracle = Aggregate {
            count: values.len() as u64,
            sum: values.iter().sum(),
        };
        let mut g = granule(0, 0);
        let mut final_agg = Aggregate::default();
        for (i, v) in values.iter().enumerate() {
            g.unconsumed.records += 1;
            g.unconsumed.bytes += 8;
            g.unconsumed.agg = g.unconsumed.agg.merge(Aggregate { count: 1, sum: *v });
            if g.unconsumed.records >= 64 || i + 1 == values.len() {
                let taken = consume(&mut g);
                if i + 1 == values.len() {
                    final_agg = taken.agg;
                } else {
                    pipeline_writeback(&mut g, ComputeType::StatefulCa, taken.agg, 8).unwrap();
                }
            }
        }
        assert_eq!(final_agg, oracle);
    }

    #[test]
    fn streaming_fire_count_is_ceiling() {
        // records arrive one at a time; each DataReady is consumed at once.
        for (records, x) in [(250u64, 100u64), (200, 100), (1, 7), (99, 1)] {
            let mut m = master(TriggerSpec::DefaultStreaming { x });
            let mut gs = vec![granule(0, 0)];
            let mut fires = 0;
            for _ in 0..records {
                gs[0].unconsumed.records += 1;
                let ev = m.after_ingest(&mut gs, &[0], 0);
                fires += ev.len();
                if !ev.is_empty() {
                    consume(&mut gs[0]);
                    m.after_consumed(&mut gs, 0);
                }
            }
            let flush = m.on_data_generated(&mut gs).unwrap();
            fires += flush
                .iter()
                .filter(|e| matches!(e, EventKind::DataReady { .. }))
                .count();
            assert_eq!(fires as u64, records.div_ceil(x), "records={records} x={x}");
        }
    }

    #[test]
    fn pipelined_flush_waits_for_running_consumer() {
        let mut m = StageMaster::new(
            StageKey::new(0, 0),
            TriggerSpec::Pipelining { x: 10 },
            vec![StageKey::new(0, 1)],
        );
        let mut gs = vec![granule(0, 10), granule(1, 3)];
        let ev = m.after_ingest(&mut gs, &[0, 1], 0);
        assert_eq!(ev.len(), 1);
        let taken = consume(&mut gs[0]);
        let ev = m.on_data_generated(&mut gs).unwrap();
        // granule 1 flushed, granule 0 waits, no DataReadyAll yet
        assert_eq!(ev.len(), 1);
        pipeline_writeback(&mut gs[0], ComputeType::StatefulCa, taken.agg, 10).unwrap();
        let ev = m.after_writeback(&mut gs, 0);
        assert_eq!(ev.len(), 2);
        assert!(matches!(ev[1], EventKind::DataReadyAll { .. }));
    }
}
