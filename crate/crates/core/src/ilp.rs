//! Exact placement oracle for small instances.
//!
//! Every granule goes to exactly one machine. The weighted objective is
//! `w1*O1 + w2*O2 + w3*O3`:
//! * O1, the largest per-machine load after placement;
//! * O2, the bytes living outside each granule's primary location;
//! * O3, the number of granules placed on a machine that stores ancestor data
//!   (unless the granule is already co-located with its ancestors).
//!
//! Placements must respect every job's per-machine quota.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Enumeration envelope for [`solve_exact`].
pub const MAX_SEARCH_SPACE: f64 = 1e7;

#[derive(Debug, Error, PartialEq)]
pub enum IlpError {
    #[error("no placement satisfies the quotas")]
    Infeasible,
    #[error("search space of {0:.0} placements exceeds the exhaustive envelope")]
    TooLarge(f64),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlpGranule {
    pub job: usize,
    /// Existing bytes per machine.
    pub b: Vec<u64>,
    /// Expected remaining bytes.
    pub e: u64,
}

impl IlpGranule {
    pub fn total(&self) -> u64 {
        self.e + self.b.iter().sum::<u64>()
    }

    /// Machine with the most existing bytes (lowest index on ties).
    pub fn primary(&self) -> usize {
        let mut best = 0;
        for (i, &b) in self.b.iter().enumerate() {
            if b > self.b[best] {
                best = i;
            }
        }
        best
    }

    /// Bytes that stay at the primary location if future bytes go to `i`.
    pub fn primary_mass(&self, i: usize) -> u64 {
        let top = self.b[self.primary()];
        if self.b[i] + self.e <= top {
            top
        } else {
            self.b[i] + self.e
        }
    }

    pub fn spread_penalty(&self, i: usize) -> u64 {
        self.total() - self.primary_mass(i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlpInstance {
    pub machines: usize,
    pub granules: Vec<IlpGranule>,
    /// Per-machine quota, indexed by job.
    pub quotas: Vec<u64>,
    /// Machines storing each granule's ancestor data.
    #[serde(default)]
    pub i0: Vec<Vec<usize>>,
    /// Granule already shares locations with its ancestors.
    #[serde(default)]
    pub f: Vec<bool>,
    #[serde(default)]
    pub weights: Option<[f64; 3]>,
}

/// Granule index to machine index.
pub type Placement = Vec<usize>;

impl IlpInstance {
    pub fn from_json(s: &str) -> Result<Self, IlpError> {
        let inst: Self = serde_json::from_str(s).map_err(|e| IlpError::InvalidInstance(e.to_string()))?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<(), IlpError> {
        let bad = |m: String| Err(IlpError::InvalidInstance(m));
        if self.machines == 0 {
            return bad("no machines".into());
        }
        for (k, g) in self.granules.iter().enumerate() {
            if g.b.len() != self.machines {
                return bad(format!(
                    "granule {k} has {} byte entries for {} machines",
                    g.b.len(),
                    self.machines
                ));
            }
            if g.job >= self.quotas.len() {
                return bad(format!("granule {k} names job {} without a quota", g.job));
            }
        }
        if !self.i0.is_empty() && self.i0.len() != self.granules.len() {
            return bad("i0 length differs from granule count".into());
        }
        if self.i0.iter().flatten().any(|&i| i >= self.machines) {
            return bad("i0 names an unknown machine".into());
        }
        if !self.f.is_empty() && self.f.len() != self.granules.len() {
            return bad("f length differs from granule count".into());
        }
        Ok(())
    }

    /// Explicit weights, or `(1, 1, largest granule bytes)`.
    pub fn weights(&self) -> [f64; 3] {
        self.weights.unwrap_or_else(|| {
            let w3 = self.granules.iter().map(IlpGranule::total).max().unwrap_or(1).max(1);
            [1.0, 1.0, w3 as f64]
        })
    }

    fn flagged(&self, k: usize) -> bool {
        self.f.get(k).copied().unwrap_or(false)
    }

    fn near_ancestor(&self, k: usize, i: usize) -> bool {
        self.i0.get(k).is_some_and(|s| s.contains(&i))
    }

    fn ft_penalty(&self, k: usize, i: usize) -> u64 {
        u64::from(!self.flagged(k) && self.near_ancestor(k, i))
    }

    fn base_loads(&self) -> Vec<u64> {
        let mut loads = vec![0u64; self.machines];
        for g in &self.granules {
            for (i, b) in g.b.iter().enumerate() {
                loads[i] += b;
            }
        }
        loads
    }

    fn base_job_loads(&self) -> Vec<Vec<u64>> {
        let mut loads = vec![vec![0u64; self.machines]; self.quotas.len()];
        for g in &self.granules {
            for (i, b) in g.b.iter().enumerate() {
                loads[g.job][i] += b;
            }
        }
        loads
    }
}

pub fn objective_o1(inst: &IlpInstance, x: &Placement) -> u64 {
    let mut loads = inst.base_loads();
    for (k, &i) in x.iter().enumerate() {
        loads[i] += inst.granules[k].e;
    }
    loads.into_iter().max().unwrap_or(0)
}

pub fn objective_o2(inst: &IlpInstance, x: &Placement) -> u64 {
    x.iter()
        .enumerate()
        .map(|(k, &i)| inst.granules[k].spread_penalty(i))
        .sum()
}

pub fn objective_o3(inst: &IlpInstance, x: &Placement) -> u64 {
    x.iter().enumerate().map(|(k, &i)| inst.ft_penalty(k, i)).sum()
}

pub fn weighted_objective(inst: &IlpInstance, x: &Placement) -> f64 {
    let [w1, w2, w3] = inst.weights();
    w1 * objective_o1(inst, x) as f64 + w2 * objective_o2(inst, x) as f64 + w3 * objective_o3(inst, x) as f64
}

pub fn feasible(inst: &IlpInstance, x: &Placement) -> bool {
    if x.len() != inst.granules.len() || x.iter().any(|&i| i >= inst.machines) {
        return false;
    }
    let mut loads = inst.base_job_loads();
    for (k, &i) in x.iter().enumerate() {
        loads[inst.granules[k].job][i] += inst.granules[k].e;
    }
    loads
        .iter()
        .enumerate()
        .all(|(j, row)| row.iter().all(|&l| l <= inst.quotas[j]))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Solution {
    pub placement: Placement,
    pub objective: f64,
    pub o1: u64,
    pub o2: u64,
    pub o3: u64,
}

impl Solution {
    fn of(inst: &IlpInstance, placement: Placement) -> Self {
        Self {
            objective: weighted_objective(inst, &placement),
            o1: objective_o1(inst, &placement),
            o2: objective_o2(inst, &placement),
            o3: objective_o3(inst, &placement),
            placement,
        }
    }
}

struct Search<'a> {
    inst: &'a IlpInstance,
    w: [f64; 3],
    /// Cheapest spread plus fault-tolerance cost still owed by granules k.. .
    tail_min: Vec<f64>,
    loads: Vec<u64>,
    job_loads: Vec<Vec<u64>>,
    current: Placement,
    best: Option<(f64, Placement)>,
}

impl Search<'_> {
    const TOL: f64 = 1e-9;

    fn dfs(&mut self, k: usize, partial: f64) {
        let inst = self.inst;
        if k == inst.granules.len() {
            let o1 = *self.loads.iter().max().unwrap_or(&0) as f64;
            let obj = self.w[0] * o1 + partial;
            if self
                .best
                .as_ref()
                .is_none_or(|(b, _)| obj < b - Self::TOL * b.abs().max(1.0))
            {
                self.best = Some((obj, self.current.clone()));
            }
            return;
        }
        let g = &inst.granules[k];
        for i in 0..inst.machines {
            if self.job_loads[g.job][i] + g.e > inst.quotas[g.job] {
                continue;
            }
            self.loads[i] += g.e;
            self.job_loads[g.job][i] += g.e;
            let cost = partial + self.w[1] * g.spread_penalty(i) as f64 + self.w[2] * inst.ft_penalty(k, i) as f64;
            let o1 = *self.loads.iter().max().unwrap_or(&0) as f64;
            let bound = self.w[0] * o1 + cost + self.tail_min[k + 1];
            let prune = self
                .best
                .as_ref()
                .is_some_and(|(b, _)| bound > b + Self::TOL * b.abs().max(1.0));
            if !prune {
                self.current.push(i);
                self.dfs(k + 1, cost);
                self.current.pop();
            }
            self.loads[i] -= g.e;
            self.job_loads[g.job][i] -= g.e;
        }
    }
}

/// Optimal feasible placement by branch and bound over placements in
/// lexicographic order. Among equal objectives the lexicographically smallest
/// placement wins.
pub fn solve_exact(inst: &IlpInstance) -> Result<Solution, IlpError> {
    inst.validate()?;
    let space = (inst.machines as f64).powi(inst.granules.len() as i32);
    if space > MAX_SEARCH_SPACE {
        return Err(IlpError::TooLarge(space));
    }
    let w = inst.weights();
    let g = inst.granules.len();
    let mut tail_min = vec![0.0; g + 1];
    for k in (0..g).rev() {
        let cheapest = (0..inst.machines)
            .map(|i| w[1] * inst.granules[k].spread_penalty(i) as f64 + w[2] * inst.ft_penalty(k, i) as f64)
            .fold(f64::INFINITY, f64::min);
        tail_min[k] = tail_min[k + 1] + cheapest;
    }
    let job_loads = inst.base_job_loads();
    if job_loads
        .iter()
        .enumerate()
        .any(|(j, row)| row.iter().any(|&l| l > inst.quotas[j]))
    {
        return Err(IlpError::Infeasible);
    }
    let mut s = Search {
        inst,
        w,
        tail_min,
        loads: inst.base_loads(),
        job_loads,
        current: Vec::with_capacity(g),
        best: None,
    };
    s.dfs(0, 0.0);
    let (_, placement) = s.best.ok_or(IlpError::Infeasible)?;
    Ok(Solution::of(inst, placement))
}

/// Placement produced by the data store's new-stage heuristics applied to
/// the instance: per job, pick machines below the pressure threshold of the
/// quota, prefer those already holding the job's data and avoiding ancestor
/// locations, then least loaded; spread granules round-robin over them.
pub fn heuristic_placement(inst: &IlpInstance, pressure_threshold: f64) -> Solution {
    let m = inst.machines;
    let loads = inst.base_loads();
    let job_loads = inst.base_job_loads();
    let mut x = vec![0usize; inst.granules.len()];
    for (j, job_row) in job_loads.iter().enumerate() {
        let ks: Vec<usize> = (0..inst.granules.len())
            .filter(|&k| inst.granules[k].job == j)
            .collect();
        if ks.is_empty() {
            continue;
        }
        let limit = pressure_threshold * inst.quotas[j] as f64;
        let light: Vec<usize> = (0..m).filter(|&i| (job_row[i] as f64) < limit).collect();
        let m75 = light.len();
        let mv = if m75 == 0 {
            1
        } else {
            let raw = (m75 * (m - m75)) as f64 / m as f64;
            ((raw + 0.5).floor() as usize).max(2).min(m75)
        };
        let holds: BTreeSet<usize> = ks
            .iter()
            .flat_map(|&k| (0..m).filter(move |&i| inst.granules[k].b[i] > 0))
            .collect();
        let ancestors: BTreeSet<usize> = ks
            .iter()
            .filter(|&&k| !inst.flagged(k))
            .flat_map(|&k| inst.i0.get(k).into_iter().flatten().copied())
            .collect();
        let mut order: Vec<usize> = if light.is_empty() { (0..m).collect() } else { light };
        let any_local = order.iter().any(|i| holds.contains(i));
        order.sort_by_key(|&i| {
            let local = !any_local || holds.contains(&i);
            (!local, ancestors.contains(&i), loads[i], i)
        });
        order.truncate(mv);
        // round-robin, skipping machines where the granule would break the quota
        let mut row = job_row.clone();
        for (n, &k) in ks.iter().enumerate() {
            let e = inst.granules[k].e;
            let fits = |i: usize, row: &[u64]| row[i] + e <= inst.quotas[j];
            let preferred = (0..order.len())
                .map(|d| order[(n + d) % order.len()])
                .find(|&i| fits(i, &row));
            let fallback = || (0..m).filter(|&i| fits(i, &row)).min_by_key(|&i| (row[i], i));
            let i = preferred.or_else(fallback).unwrap_or(order[n % order.len()]);
            row[i] += e;
            x[k] = i;
        }
    }
    Solution::of(inst, x)
}

/// Random small instance with uniform expected bytes and quotas that leave
/// some slack above the existing load.
pub fn random_instance<R: Rng>(rng: &mut R, max_machines: usize, max_granules: usize) -> IlpInstance {
    let machines = rng.random_range(1..=max_machines);
    let g = rng.random_range(1..=max_granules);
    let jobs = rng.random_range(1..=2usize.min(g));
    let e = rng.random_range(0..=8u64);
    let granules: Vec<IlpGranule> = (0..g)
        .map(|k| IlpGranule {
            job: k % jobs,
            b: (0..machines)
                .map(|_| {
                    if rng.random_bool(0.4) {
                        rng.random_range(1..=10)
                    } else {
                        0
                    }
                })
                .collect(),
            e,
        })
        .collect();
    let mut existing = vec![vec![0u64; machines]; jobs];
    for gr in &granules {
        for (i, b) in gr.b.iter().enumerate() {
            existing[gr.job][i] += b;
        }
    }
    let quotas = (0..jobs)
        .map(|j| {
            let owed: u64 = granules.iter().filter(|gr| gr.job == j).map(|gr| gr.e).sum();
            let top = existing[j].iter().copied().max().unwrap_or(0);
            top + (owed as f64 * rng.random_range(0.5..=1.0)).ceil() as u64
        })
        .collect();
    let i0 = (0..g)
        .map(|_| (0..machines).filter(|_| rng.random_bool(0.3)).collect())
        .collect();
    let f = (0..g).map(|_| rng.random_bool(0.2)).collect();
    IlpInstance {
        machines,
        granules,
        quotas,
        i0,
        f,
        weights: None,
    }
}
