//! Joint planning by alternating the interval and cut solvers.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convergence::{theta_prime, ConvergenceParams};
use crate::error::{HsflError, Result};
use crate::latency::split_round_latency;
use crate::ma::{solve_ma_for_cut, MaOptions};
use crate::ms::{all_memory_feasible, enumerate_cuts, objective_constants, solve_ms, MsMethod};
use crate::plan::{AggSchedule, CutVector, Plan};
use crate::profile::ModelProfile;
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BcdOptions {
    /// Stop once the relative change of Θ′ is at most this.
    pub threshold: f64,
    pub max_outer: usize,
    pub ma: MaOptions,
    pub ms_method: MsMethod,
}

impl Default for BcdOptions {
    fn default() -> Self {
        BcdOptions { threshold: 1e-6, max_outer: 50, ma: MaOptions::default(), ms_method: MsMethod::Enumeration }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BcdRecord {
    pub iteration: usize,
    pub cut: CutVector,
    pub intervals: AggSchedule,
    pub objective: f64,
    /// The interval step found nothing better than the incumbent intervals.
    pub kept_intervals: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BcdTrace {
    pub initial: Plan,
    pub initial_objective: f64,
    pub records: Vec<BcdRecord>,
    pub plan: Plan,
    pub objective: f64,
    pub converged: bool,
    pub threshold: f64,
}

/// Θ′ of a plan at tight auxiliary latencies.
pub fn plan_objective(params: &ConvergenceParams, profile: &ModelProfile, topo: &Topology, plan: &Plan, batch: usize) -> Result<f64> {
    let consts = objective_constants(params, profile, topo, &plan.cut, batch)?;
    theta_prime(params, &consts, &plan.intervals)
}

/// The memory-feasible cut with the smallest per-round split latency; the
/// lexicographically smallest wins ties.
pub fn fastest_feasible_cut(profile: &ModelProfile, topo: &Topology, batch: usize) -> Result<CutVector> {
    let mut best: Option<(CutVector, f64)> = None;
    for cut in enumerate_cuts(profile.num_layers(), topo.num_tiers())? {
        if !all_memory_feasible(profile, topo, &cut, batch)? {
            continue;
        }
        let t = split_round_latency(profile, topo, &cut, batch)?;
        if best.as_ref().is_none_or(|(_, b)| t < *b) {
            best = Some((cut, t));
        }
    }
    best.map(|(c, _)| c).ok_or_else(|| HsflError::Infeasible {
        reason: "no cut vector fits the memory budgets".to_string(),
        margin: 0.0,
        tier_terms: Vec::new(),
    })
}

/// The default starting point: fastest feasible cut, every interval 1.
pub fn initial_plan(profile: &ModelProfile, topo: &Topology, batch: usize) -> Result<Plan> {
    Ok(Plan { cut: fastest_feasible_cut(profile, topo, batch)?, intervals: AggSchedule::ones(topo.num_tiers()) })
}

pub fn run_bcd(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    batch: usize,
    init: Option<Plan>,
    opts: &BcdOptions,
) -> Result<BcdTrace> {
    params.validate()?;
    let initial = match init {
        Some(p) => p,
        None => initial_plan(profile, topo, batch)?,
    };
    let initial_objective = plan_objective(params, profile, topo, &initial, batch)?;

    let mut plan = initial.clone();
    let mut objective = initial_objective;
    let mut records = Vec::new();
    let mut converged = false;
    for iteration in 1..=opts.max_outer {
        let context = |e: HsflError| match e {
            HsflError::NonConvergence { iterations, detail, last_iterate } => HsflError::NonConvergence {
                iterations,
                detail: format!("outer iteration {iteration}: {detail}"),
                last_iterate,
            },
            other => other,
        };
        let ma = solve_ma_for_cut(params, profile, topo, &plan.cut, batch, &opts.ma).map_err(context)?;
        let (intervals, kept_intervals) = if ma.objective <= objective {
            (ma.intervals, false)
        } else {
            (plan.intervals.clone(), true)
        };
        let ms = solve_ms(params, profile, topo, &intervals, batch, opts.ms_method).map_err(context)?;
        let next = Plan { cut: ms.cut, intervals };
        let next_objective = plan_objective(params, profile, topo, &next, batch)?;
        let change = (objective - next_objective).abs();
        records.push(BcdRecord {
            iteration,
            cut: next.cut.clone(),
            intervals: next.intervals.clone(),
            objective: next_objective,
            kept_intervals,
        });
        log::debug!("bcd iteration {iteration}: cut {} intervals {} objective {next_objective:.6e}", next.cut, next.intervals);
        plan = next;
        objective = next_objective;
        if change <= opts.threshold * objective.abs() {
            converged = true;
            break;
        }
    }
    Ok(BcdTrace { initial, initial_objective, records, plan, objective, converged, threshold: opts.threshold })
}

/// Inclusive ranges for the random comparison strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineRanges {
    pub interval: (u64, u64),
    pub cut: (usize, usize),
}

impl Default for BaselineRanges {
    fn default() -> Self {
        BaselineRanges { interval: (1, 25), cut: (3, 14) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselinePlans {
    /// Random intervals with the optimal cut for them.
    pub random_ma: Plan,
    /// Random cut with the optimal intervals for it.
    pub random_ms: Plan,
    /// Random intervals and random cut.
    pub random_both: Plan,
}

pub fn random_intervals(rng: &mut impl Rng, num_tiers: usize, range: (u64, u64)) -> Result<AggSchedule> {
    if range.0 < 1 || range.0 > range.1 {
        return Err(HsflError::invalid(format!("interval range {range:?} is empty or below 1")));
    }
    AggSchedule::new((0..num_tiers - 1).map(|_| rng.random_range(range.0..=range.1)).collect())
}

/// A uniformly drawn memory-feasible cut with every cut layer in `range`.
pub fn random_cut(
    rng: &mut impl Rng,
    profile: &ModelProfile,
    topo: &Topology,
    batch: usize,
    range: (usize, usize),
) -> Result<CutVector> {
    let mut admissible = Vec::new();
    for cut in enumerate_cuts(profile.num_layers(), topo.num_tiers())? {
        let inside = cut.cuts().iter().all(|&c| c >= range.0 && c <= range.1);
        if inside && all_memory_feasible(profile, topo, &cut, batch)? {
            admissible.push(cut);
        }
    }
    admissible.choose(rng).cloned().ok_or_else(|| HsflError::Infeasible {
        reason: format!("no memory-feasible cut with all cut layers in {range:?}"),
        margin: 0.0,
        tier_terms: Vec::new(),
    })
}

pub fn random_baselines(
    seed: u64,
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    batch: usize,
    ranges: &BaselineRanges,
    opts: &BcdOptions,
) -> Result<BaselinePlans> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intervals = random_intervals(&mut rng, topo.num_tiers(), ranges.interval)?;
    let cut = random_cut(&mut rng, profile, topo, batch, ranges.cut)?;
    let best_cut = solve_ms(params, profile, topo, &intervals, batch, opts.ms_method)?.cut;
    let best_intervals = solve_ma_for_cut(params, profile, topo, &cut, batch, &opts.ma)?.intervals;
    Ok(BaselinePlans {
        random_ma: Plan { cut: best_cut, intervals: intervals.clone() },
        random_ms: Plan { cut: cut.clone(), intervals: best_intervals },
        random_both: Plan { cut, intervals },
    })
}
