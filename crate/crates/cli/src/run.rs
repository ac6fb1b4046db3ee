use std::path::{Path, PathBuf};
use std::thread;

use granary_core::sim::{self, MetricsReport, SimConfig, Trace};
use granary_core::{Mode, Workload};
use serde::Serialize;

use crate::error::{read, write, CliError, Result};
use crate::manifest::Clock;

pub struct RunArgs {
    pub workload: PathBuf,
    pub config: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub reps: usize,
}

#[derive(Serialize)]
struct RepSummary {
    seed: u64,
    dir: String,
    makespan_s: f64,
    mean_jct_s: f64,
}

#[derive(Serialize)]
struct Summary {
    mode: Mode,
    workload_hash: String,
    reps: Vec<RepSummary>,
    mean_makespan_s: f64,
    mean_jct_s: f64,
}

fn load(args: &RunArgs) -> Result<(Workload, SimConfig)> {
    let workload = Workload::from_json(&read(&args.workload)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.workload.display())))?;
    workload.build().map_err(|e| CliError::Input(e.to_string()))?;
    let mut cfg = match &args.config {
        Some(p) => SimConfig::from_json(&read(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        None => SimConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok((workload, cfg))
}

fn save(dir: &Path, trace: &Trace, metrics: &MetricsReport) -> Result<()> {
    write(&dir.join("trace.jsonl"), &trace.to_jsonl())?;
    write(&dir.join("metrics.json"), &metrics.to_json_pretty())
}

pub fn cmd_run(args: RunArgs) -> Result<()> {
    if args.reps == 0 {
        return Err(CliError::Input("--reps must be at least 1".into()));
    }
    let clock = Clock::start();
    let (workload, cfg) = load(&args)?;

    if args.reps == 1 {
        let (trace, m) = sim::run(&workload, &cfg)?;
        save(&args.out, &trace, &m)?;
        println!(
            "{}: makespan {:.3} s, mean JCT {:.3} s over {} jobs",
            m.mode.as_str(),
            m.makespan_s,
            m.mean_jct_s,
            m.jobs.len()
        );
        return clock.finish(&args.out, "run", &["trace.jsonl".into(), "metrics.json".into()]);
    }

    // each repetition runs in its own thread; only this thread writes files
    let seeds: Vec<u64> = (0..args.reps as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let results: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = SimConfig { seed, ..cfg.clone() };
                let workload = &workload;
                s.spawn(move || sim::run(workload, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(sim::SimError::Stuck("worker panicked".into())))
            })
            .collect()
    });

    let mut reps = Vec::new();
    let mut outputs = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        let (trace, m) = r?;
        let dir = format!("rep-{seed}");
        save(&args.out.join(&dir), &trace, &m)?;
        println!(
            "seed {seed}: makespan {:.3} s, mean JCT {:.3} s",
            m.makespan_s, m.mean_jct_s
        );
        outputs.push(format!("{dir}/trace.jsonl"));
        outputs.push(format!("{dir}/metrics.json"));
        reps.push(RepSummary {
            seed: *seed,
            dir,
            makespan_s: m.makespan_s,
            mean_jct_s: m.mean_jct_s,
        });
    }
    let n = reps.len() as f64;
    let summary = Summary {
        mode: cfg.mode,
        workload_hash: workload.hash(),
        mean_makespan_s: reps.iter().map(|r| r.makespan_s).sum::<f64>() / n,
        mean_jct_s: reps.iter().map(|r| r.mean_jct_s).sum::<f64>() / n,
        reps,
    };
    println!(
        "{}: {} reps, mean makespan {:.3} s, mean JCT {:.3} s",
        cfg.mode.as_str(),
        summary.reps.len(),
        summary.mean_makespan_s,
        summary.mean_jct_s
    );
    write(
        &args.out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    outputs.push("summary.json".into());
    clock.finish(&args.out, "run", &outputs)
}
