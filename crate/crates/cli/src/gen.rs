use std::path::PathBuf;

use granary_core::sim::{generate_workload, GenParams, Template};

use crate::error::{write, CliError, Result};

pub struct GenArgs {
    pub template: String,
    pub seed: u64,
    pub out: PathBuf,
    pub config_out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub iters: Option<usize>,
    pub interarrival: Option<f64>,
}

pub fn cmd_gen(args: GenArgs) -> Result<()> {
    let template: Template = args.template.parse().map_err(|e| CliError::Input(format!("{e}")))?;
    let d = GenParams::default();
    let params = GenParams {
        jobs: args.jobs.unwrap_or(d.jobs),
        iters: args.iters.unwrap_or(d.iters),
        mean_interarrival_s: args.interarrival.unwrap_or(d.mean_interarrival_s),
        ..d
    };
    if params.jobs == 0 || params.mean_interarrival_s.is_nan() || params.mean_interarrival_s < 0.0 {
        return Err(CliError::Input(
            "--jobs must be positive and --interarrival non-negative".into(),
        ));
    }
    let w = generate_workload(template, &params, args.seed);
    write(&args.out, &w.to_json_pretty())?;
    if let Some(c) = &args.config_out {
        write(c, &template.config().to_json_pretty())?;
    }
    println!("{template}: {} jobs written to {}", w.jobs.len(), args.out.display());
    Ok(())
}
