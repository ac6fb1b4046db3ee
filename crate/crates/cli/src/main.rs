//! `granary`: generate workloads, run the simulator in either mode, compare
//! runs and exercise the placement solver.

mod compare;
mod error;
mod gen;
mod ilp;
mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use granary_core::Mode;

use crate::error::Result;

#[derive(Parser)]
#[command(
    name = "granary",
    version,
    about = "Granule-based data store and scheduler simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "data_driven", alias = "data-driven")]
    DataDriven,
    #[value(name = "compute_centric", alias = "compute-centric")]
    ComputeCentric,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::DataDriven => Mode::DataDriven,
            ModeArg::ComputeCentric => Mode::ComputeCentric,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a workload and write trace.jsonl and metrics.json.
    Run {
        #[arg(long)]
        workload: PathBuf,
        /// Simulator config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed; repetitions use consecutive seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        reps: usize,
    },
    /// Compare two run directories (ratios are a/b).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Directory for comparison.json and the ratio CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve a placement instance exactly and score the heuristic against it.
    Ilp {
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        instance: Option<PathBuf>,
        /// Sweep N seeded random instances instead.
        #[arg(long, value_name = "N")]
        random: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        max_machines: usize,
        #[arg(long, default_value_t = 6)]
        max_granules: usize,
        /// Quota pressure threshold used by the heuristic.
        #[arg(long, default_value_t = 0.75)]
        threshold: f64,
        #[arg(long)]
        json: bool,
    },
    /// Write a workload generated from a template.
    Gen {
        #[arg(long)]
        template: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the template's calibrated simulator config.
        #[arg(long)]
        config_out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        /// Mean gap between job arrivals in seconds.
        #[arg(long)]
        interarrival: Option<f64>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            workload,
            config,
            mode,
            out,
            seed,
            reps,
        } => run::cmd_run(run::RunArgs {
            workload,
            config,
            mode: mode.map(Mode::from),
            out,
            seed,
            reps,
        }),
        Command::Compare { a, b, out } => compare::cmd_compare(a, b, out),
        Command::Ilp {
            instance,
            random,
            seed,
            max_machines,
            max_granules,
            threshold,
            json,
        } => ilp::cmd_ilp(ilp::IlpArgs {
            instance,
            random,
            seed,
            max_machines,
            max_granules,
            threshold,
            json,
        }),
        Command::Gen {
            template,
            seed,
            out,
            config_out,
            jobs,
            iters,
            interarrival,
        } => gen::cmd_gen(gen::GenArgs {
            template,
            seed,
            out,
            config_out,
            jobs,
            iters,
            interarrival,
        }),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
