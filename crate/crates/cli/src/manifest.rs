//! Wall-clock provenance kept apart from the deterministic outputs.

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{write, Result};

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    version: &'static str,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    elapsed_ms: u128,
    outputs: &'a [String],
}

pub struct Clock {
    started: SystemTime,
    t0: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Self {
            started: SystemTime::now(),
            t0: Instant::now(),
        }
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(self, dir: &Path, command: &str, outputs: &[String]) -> Result<()> {
        let ms = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let m = Manifest {
            command,
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION"),
            started_unix_ms: ms(self.started),
            finished_unix_ms: ms(SystemTime::now()),
            elapsed_ms: self.t0.elapsed().as_millis(),
            outputs,
        };
        write(
            &dir.join("manifest.json"),
            &serde_json::to_string_pretty(&m).expect("manifest serializes"),
        )
    }
}
