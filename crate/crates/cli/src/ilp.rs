use std::path::PathBuf;

use granary_core::ilp::{feasible, heuristic_placement, random_instance, solve_exact, IlpError, IlpInstance, Solution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{read, CliError, Result};

/// Heuristic over optimum weighted objective; `None` when the heuristic
/// breaks a quota.
fn heuristic_ratio(inst: &IlpInstance, opt: &Solution, heur: &Solution) -> Option<f64> {
    if !feasible(inst, &heur.placement) {
        return None;
    }
    Some(if heur.objective == opt.objective {
        1.0
    } else {
        heur.objective / opt.objective
    })
}

#[derive(Serialize)]
struct SingleReport<'a> {
    optimum: &'a Solution,
    heuristic: &'a Solution,
    heuristic_feasible: bool,
    ratio: Option<f64>,
}

#[derive(Debug, Default, Serialize)]
pub struct SweepReport {
    pub instances: usize,
    pub solved: usize,
    pub infeasible: usize,
    pub too_large: usize,
    pub heuristic_infeasible: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
}

pub fn sweep(n: usize, seed: u64, max_machines: usize, max_granules: usize, threshold: f64) -> SweepReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SweepReport {
        instances: n,
        ..SweepReport::default()
    };
    let mut ratios = Vec::new();
    for _ in 0..n {
        let inst = random_instance(&mut rng, max_machines, max_granules);
        match solve_exact(&inst) {
            Ok(opt) => {
                r.solved += 1;
                match heuristic_ratio(&inst, &opt, &heuristic_placement(&inst, threshold)) {
                    Some(x) => ratios.push(x),
                    None => r.heuristic_infeasible += 1,
                }
            }
            Err(IlpError::Infeasible) => r.infeasible += 1,
            Err(_) => r.too_large += 1,
        }
    }
    r.max_ratio = ratios.iter().copied().fold(1.0, f64::max);
    r.mean_ratio = if ratios.is_empty() {
        1.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    r
}

pub struct IlpArgs {
    pub instance: Option<PathBuf>,
    pub random: Option<usize>,
    pub seed: u64,
    pub max_machines: usize,
    pub max_granules: usize,
    pub threshold: f64,
    pub json: bool,
}

pub fn cmd_ilp(args: IlpArgs) -> Result<()> {
    if !(args.threshold > 0.0 && args.threshold <= 1.0) {
        return Err(CliError::Input("--threshold must lie in (0, 1]".into()));
    }
    if let Some(n) = args.random {
        if args.max_machines == 0 || args.max_granules == 0 {
            return Err(CliError::Input("instance bounds must be positive".into()));
        }
        let r = sweep(n, args.seed, args.max_machines, args.max_granules, args.threshold);
        if args.json {
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        } else {
            println!(
                "{} instances: {} solved, {} infeasible, {} too large; heuristic ratio max {:.3} mean {:.3}, {} heuristic placements infeasible",
                r.instances, r.solved, r.infeasible, r.too_large, r.max_ratio, r.mean_ratio, r.heuristic_infeasible
            );
        }
        return Ok(());
    }
    let path = args
        .instance
        .ok_or_else(|| CliError::Input("give --instance FILE or --random N".into()))?;
    let inst = IlpInstance::from_json(&read(&path)?)?;
    let opt = solve_exact(&inst)?;
    let heur = heuristic_placement(&inst, args.threshold);
    let ratio = heuristic_ratio(&inst, &opt, &heur);
    if args.json {
        let r = SingleReport {
            optimum: &opt,
            heuristic: &heur,
            heuristic_feasible: ratio.is_some(),
            ratio,
        };
        println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
    } else {
        let line = |label: &str, s: &Solution| {
            println!(
                "{label} {} (o1 {}, o2 {}, o3 {}) placement {:?}",
                s.objective, s.o1, s.o2, s.o3, s.placement
            )
        };
        line("optimum", &opt);
        line("heuristic", &heur);
        match ratio {
            Some(x) => println!("ratio {x:.3}"),
            None => println!("heuristic placement breaks a quota"),
        }
    }
    Ok(())
}
