use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use granary_core::sim::MetricsReport;
use granary_core::Mode;
use serde::Serialize;

use crate::error::{read, write, CliError, Result};

/// `a / b`, with equal values (including 0/0) giving exactly 1.
pub fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Serialize)]
pub struct Distribution {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

impl Distribution {
    fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
            p50: percentile(&v, 50.0),
            p95: percentile(&v, 95.0),
            min: v.first().copied().unwrap_or(f64::NAN),
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct JobRow {
    pub job: u32,
    pub name: String,
    pub jct_a_s: f64,
    pub jct_b_s: f64,
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct StageRow {
    pub job: String,
    pub stage: String,
    pub span_a_s: Option<f64>,
    pub span_b_s: Option<f64>,
    pub ratio: Option<f64>,
}

/// A metric from both runs and their ratio.
#[derive(Debug, Serialize)]
pub struct Pair {
    pub a: f64,
    pub b: f64,
    pub ratio: f64,
}

impl Pair {
    fn new(a: f64, b: f64) -> Self {
        Self {
            a,
            b,
            ratio: ratio(a, b),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub workload_hash: String,
    pub mode_a: Mode,
    pub mode_b: Mode,
    pub makespan: Pair,
    pub mean_jct: Pair,
    pub jct_ratio: Distribution,
    pub data_local_task_fraction: Pair,
    pub dl_granule_fraction: Pair,
    pub ft_granule_fraction: Pair,
    /// Most loaded machine over the ideal even share.
    pub load_max_over_ideal: Pair,
    pub jobs: Vec<JobRow>,
    pub stages: Vec<StageRow>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn load_ratio(m: &MetricsReport) -> f64 {
    if m.load.ideal > 0.0 {
        m.load.max as f64 / m.load.ideal
    } else {
        1.0
    }
}

pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<Comparison> {
    if a.workload_hash != b.workload_hash {
        return Err(CliError::WorkloadMismatch {
            a: a.workload_hash.clone(),
            b: b.workload_hash.clone(),
        });
    }
    let jobs: Vec<JobRow> = a
        .jobs
        .iter()
        .filter_map(|ja| {
            let jb = b.jobs.iter().find(|j| j.job == ja.job)?;
            Some(JobRow {
                job: ja.job,
                name: ja.name.clone(),
                jct_a_s: ja.jct_s,
                jct_b_s: jb.jct_s,
                ratio: ratio(ja.jct_s, jb.jct_s),
            })
        })
        .collect();
    let name = |m: &MetricsReport, job: u32| {
        m.jobs
            .iter()
            .find(|j| j.job == job)
            .map(|j| j.name.clone())
            .unwrap_or_default()
    };
    let stages = a
        .stages
        .iter()
        .filter_map(|sa| {
            let sb = b.stages.iter().find(|s| s.job == sa.job && s.stage == sa.stage)?;
            Some(StageRow {
                job: name(a, sa.job),
                stage: sa.name.clone(),
                span_a_s: sa.span_s,
                span_b_s: sb.span_s,
                ratio: sa.span_s.zip(sb.span_s).map(|(x, y)| ratio(x, y)),
            })
        })
        .collect();
    let dl = |m: &MetricsReport| mean_of(m.jobs.iter().map(|j| j.dl_granule_fraction));
    let ft = |m: &MetricsReport| mean_of(m.jobs.iter().map(|j| j.ft_granule_fraction));
    Ok(Comparison {
        workload_hash: a.workload_hash.clone(),
        mode_a: a.mode,
        mode_b: b.mode,
        makespan: Pair::new(a.makespan_s, b.makespan_s),
        mean_jct: Pair::new(a.mean_jct_s, b.mean_jct_s),
        jct_ratio: Distribution::of(&jobs.iter().map(|j| j.ratio).collect::<Vec<_>>()),
        data_local_task_fraction: Pair::new(a.data_local_task_fraction, b.data_local_task_fraction),
        dl_granule_fraction: Pair::new(dl(a), dl(b)),
        ft_granule_fraction: Pair::new(ft(a), ft(b)),
        load_max_over_ideal: Pair::new(load_ratio(a), load_ratio(b)),
        jobs,
        stages,
    })
}

fn load_metrics(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join("metrics.json");
    serde_json::from_str(&read(&path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn render(c: &Comparison) -> String {
    let mut out = String::new();
    let pair = |out: &mut String, label: &str, p: &Pair| {
        let _ = writeln!(out, "{label:<26} {:>10.4} {:>10.4} {:>8.3}x", p.a, p.b, p.ratio);
    };
    let _ = writeln!(
        out,
        "{:<26} {:>10} {:>10} {:>9}",
        "metric",
        c.mode_a.as_str(),
        c.mode_b.as_str(),
        "a/b"
    );
    pair(&mut out, "makespan_s", &c.makespan);
    pair(&mut out, "mean_jct_s", &c.mean_jct);
    pair(&mut out, "data_local_task_fraction", &c.data_local_task_fraction);
    pair(&mut out, "dl_granule_fraction", &c.dl_granule_fraction);
    pair(&mut out, "ft_granule_fraction", &c.ft_granule_fraction);
    pair(&mut out, "load_max_over_ideal", &c.load_max_over_ideal);
    let d = &c.jct_ratio;
    let _ = writeln!(
        out,
        "jct ratio: mean {:.3} p50 {:.3} p95 {:.3} min {:.3} max {:.3}",
        d.mean, d.p50, d.p95, d.min, d.max
    );
    for s in &c.stages {
        if let Some(r) = s.ratio {
            let _ = writeln!(out, "stage {}/{} span ratio {:.3}", s.job, s.stage, r);
        }
    }
    out
}

pub fn cmd_compare(a: PathBuf, b: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let c = compare(&load_metrics(&a)?, &load_metrics(&b)?)?;
    // a closed pipe (e.g. `| head`) is not an error
    let _ = std::io::stdout().write_all(render(&c).as_bytes());
    if let Some(dir) = out {
        write(
            &dir.join("comparison.json"),
            &serde_json::to_string_pretty(&c).expect("comparison serializes"),
        )?;
        write(&dir.join("job_ratios.csv"), &csv_string(&c.jobs)?)?;
        write(&dir.join("stage_ratios.csv"), &csv_string(&c.stages)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_of_equal_values_is_one() {
        assert_eq!(ratio(0.0, 0.0), 1.0);
        assert_eq!(ratio(3.0, 3.0), 1.0);
        assert_eq!(ratio(3.0, 1.5), 2.0);
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
        let d = Distribution::of(&[3.0, 1.0, 2.0]);
        assert_eq!((d.mean, d.p50, d.min, d.max), (2.0, 2.0, 1.0, 3.0));
    }
}
