//! JSON-lines trace files: one header line, then one event per line.

use serde::{Deserialize, Serialize};

use crate::model::{Event, Mode};
use crate::sim::SimError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub workload_hash: String,
    pub machines: u32,
    pub granules_per_stage: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<Event>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, SimError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| SimError::BadTrace("empty trace".into()))?;
        let header: TraceHeader = serde_json::from_str(head).map_err(|e| SimError::BadTrace(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(SimError::BadTrace(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        let events = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| SimError::BadTrace(format!("line {}: {e}", i + 2))))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, events })
    }
}
