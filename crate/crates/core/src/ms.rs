//! Model splitting for fixed aggregation intervals.
//!
//! The cut space is finite (`C(L-1, M-1)` strictly increasing vectors), so the
//! reference solver enumerates it. The Dinkelbach variant runs the parametric
//! subproblem `min N(x) − λD(x)` over the same enumeration and must agree with
//! it exactly.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::{tier_second_moments, theta_prime_parts, ConvergenceParams, ObjectiveConstants};
use crate::error::{HsflError, Result};
use crate::latency::{check_schedule, transfer_seconds};
use crate::plan::{AggSchedule, CutVector};
use crate::profile::{ByteKind, ModelProfile};
use crate::topology::Topology;

/// All strictly increasing cut vectors for `L` layers and `M` tiers, in
/// lexicographic order.
pub fn enumerate_cuts(num_layers: usize, num_tiers: usize) -> Result<impl Iterator<Item = CutVector>> {
    if num_tiers < 2 || num_layers < num_tiers {
        return Err(HsflError::invalid(format!(
            "cannot split {num_layers} layers over {num_tiers} tiers"
        )));
    }
    Ok((1..num_layers)
        .combinations(num_tiers - 1)
        .map(CutVector::new_unchecked))
}

/// Memory an entity needs to host its tier-`m` sub-models for every hosted
/// client: batch activations with their gradients plus model state.
pub fn memory_demand(profile: &ModelProfile, topo: &Topology, cut: &CutVector, batch: usize, m: usize, j: usize) -> Result<f64> {
    let (lo, hi) = cut.tier_bounds(m, profile.num_layers());
    let span = |kind| -> Result<f64> { Ok(profile.cumulative_bytes(hi, kind)? - profile.cumulative_bytes(lo, kind)?) };
    let b = batch as f64;
    let per_client = b * span(ByteKind::Activation)?
        + b * span(ByteKind::ActGrad)?
        + span(ByteKind::OptimizerState)?
        + span(ByteKind::Param)?;
    Ok(topo.entity(m, j).clients.len() as f64 * per_client)
}

/// Strict `demand < budget` for entity `j` of tier `m < M - 1`.
pub fn memory_feasible(profile: &ModelProfile, topo: &Topology, cut: &CutVector, batch: usize, m: usize, j: usize) -> Result<bool> {
    if m + 1 >= topo.num_tiers() {
        return Err(HsflError::invalid("the top tier carries no memory constraint"));
    }
    let budget = topo.entity(m, j).memory_bytes;
    Ok(memory_demand(profile, topo, cut, batch, m, j)? < budget)
}

/// Memory check over every entity below the top tier.
pub fn all_memory_feasible(profile: &ModelProfile, topo: &Topology, cut: &CutVector, batch: usize) -> Result<bool> {
    for m in 0..topo.num_tiers() - 1 {
        for j in 0..topo.entities_in(m) {
            if !memory_feasible(profile, topo, cut, batch, m, j)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Tight values of the auxiliary latencies `T_1`, `T_{m,2}`, `T_{m,3}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Auxiliaries {
    pub t1: f64,
    pub t2: Vec<f64>,
    pub t3: Vec<f64>,
    /// Client attaining `T_1`.
    pub binding_client: usize,
}

/// Evaluates the left-hand sides of the auxiliary constraints directly from
/// prefix sums and returns their maxima.
pub fn tight_auxiliaries(profile: &ModelProfile, topo: &Topology, cut: &CutVector, batch: usize) -> Result<Auxiliaries> {
    crate::latency::check_plan(profile, topo, cut)?;
    if batch < 1 {
        return Err(HsflError::invalid("batch size must be >= 1"));
    }
    let tiers = topo.num_tiers();
    let layers = profile.num_layers();
    let b = batch as f64;

    let mut t1 = f64::NEG_INFINITY;
    let mut binding_client = 0;
    for n in 0..topo.num_clients() {
        let mut lhs = 0.0;
        for m in 0..tiers {
            let (lo, hi) = cut.tier_bounds(m, layers);
            let work = (profile.cumulative_fp_flops(hi, batch)? + profile.cumulative_bp_flops(hi, batch)?)
                - (profile.cumulative_fp_flops(lo, batch)? + profile.cumulative_bp_flops(lo, batch)?);
            let f = topo.compute_flops(m, n)?;
            if !(f > 0.0) {
                return Err(HsflError::invalid(format!("compute capacity {f} must be > 0")));
            }
            lhs += work / f;
            if m + 1 < tiers {
                lhs += transfer_seconds(b * profile.activation_at(cut.cut(m))?, topo.uplink_rate(m, n)?)?;
                lhs += transfer_seconds(b * profile.act_grad_at(cut.cut(m))?, topo.downlink_rate(m, n)?)?;
            }
        }
        if lhs > t1 {
            t1 = lhs;
            binding_client = n;
        }
    }

    let mut t2 = Vec::with_capacity(tiers - 1);
    let mut t3 = Vec::with_capacity(tiers - 1);
    for m in 0..tiers - 1 {
        let (lo, hi) = cut.tier_bounds(m, layers);
        let size = profile.cumulative_bytes(hi, ByteKind::Param)? - profile.cumulative_bytes(lo, ByteKind::Param)?;
        let (mut up, mut down) = (0.0f64, 0.0f64);
        if topo.entities_in(m) > 1 {
            for j in 0..topo.entities_in(m) {
                let e = topo.entity(m, j);
                up = up.max(transfer_seconds(size, e.fed_uplink_rate)?);
                down = down.max(transfer_seconds(size, e.fed_downlink_rate)?);
            }
        }
        t2.push(up);
        t3.push(down);
    }
    Ok(Auxiliaries { t1, t2, t3, binding_client })
}

/// Θ′ constants for a cut, using tight auxiliaries.
pub fn objective_constants(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    cut: &CutVector,
    batch: usize,
) -> Result<ObjectiveConstants> {
    let aux = tight_auxiliaries(profile, topo, cut, batch)?;
    constants_from(params, profile, cut, &aux)
}

fn constants_from(params: &ConvergenceParams, profile: &ModelProfile, cut: &CutVector, aux: &Auxiliaries) -> Result<ObjectiveConstants> {
    Ok(ObjectiveConstants {
        a: aux.t1,
        b: aux.t2.iter().zip(&aux.t3).map(|(u, d)| u + d).collect(),
        c: params.epsilon - params.variance_tail(profile),
        d: tier_second_moments(profile, cut)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MsMethod {
    #[default]
    Enumeration,
    Dinkelbach,
}

impl std::str::FromStr for MsMethod {
    type Err = HsflError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enumeration" => Ok(MsMethod::Enumeration),
            "dinkelbach" => Ok(MsMethod::Dinkelbach),
            other => Err(HsflError::Parse(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsSolution {
    pub cut: CutVector,
    pub tight_t: Auxiliaries,
    pub objective: f64,
    /// Cut vectors passing the memory and convergence checks.
    pub feasible_count: usize,
    pub method: MsMethod,
    pub dinkelbach_iters: usize,
    /// λ after each Dinkelbach update; empty for enumeration.
    pub lambda_history: Vec<f64>,
}

struct Candidate {
    cut: CutVector,
    aux: Auxiliaries,
    numer: f64,
    denom: f64,
}

/// Evaluates every cut, in lexicographic order, keeping the feasible ones.
fn feasible_candidates(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    sched: &AggSchedule,
    batch: usize,
) -> Result<Vec<Candidate>> {
    check_schedule(topo, sched)?;
    let cuts: Vec<CutVector> = enumerate_cuts(profile.num_layers(), topo.num_tiers())?.collect();
    let evaluated: Vec<Result<(Option<Candidate>, bool)>> = cuts
        .into_par_iter()
        .map(|cut| {
            if !all_memory_feasible(profile, topo, &cut, batch)? {
                return Ok((None, true));
            }
            let aux = tight_auxiliaries(profile, topo, &cut, batch)?;
            let consts = constants_from(params, profile, &cut, &aux)?;
            let (numer, denom) = theta_prime_parts(params, &consts, sched.intervals());
            if !(denom > 0.0) {
                return Ok((None, false));
            }
            Ok((Some(Candidate { cut, aux, numer, denom }), false))
        })
        .collect();

    let (mut memory_rejects, mut convergence_rejects) = (0usize, 0usize);
    let mut feasible = Vec::new();
    for entry in evaluated {
        match entry? {
            (Some(c), _) => feasible.push(c),
            (None, true) => memory_rejects += 1,
            (None, false) => convergence_rejects += 1,
        }
    }
    if feasible.is_empty() {
        return Err(HsflError::Infeasible {
            reason: format!(
                "no cut vector is feasible for intervals {sched}: {memory_rejects} violate memory budgets, \
                 {convergence_rejects} leave no accuracy slack"
            ),
            margin: 0.0,
            tier_terms: Vec::new(),
        });
    }
    Ok(feasible)
}

/// Index of the first minimum; earlier (lexicographically smaller) cuts win ties.
fn first_argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

pub fn solve_ms_enumeration(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    sched: &AggSchedule,
    batch: usize,
) -> Result<MsSolution> {
    let candidates = feasible_candidates(params, profile, topo, sched, batch)?;
    let (idx, objective) = first_argmin(candidates.iter().map(|c| c.numer / c.denom));
    let feasible_count = candidates.len();
    let best = candidates.into_iter().nth(idx).expect("index from the same list");
    Ok(MsSolution {
        cut: best.cut,
        tight_t: best.aux,
        objective,
        feasible_count,
        method: MsMethod::Enumeration,
        dinkelbach_iters: 0,
        lambda_history: Vec::new(),
    })
}

pub fn solve_ms_dinkelbach(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    sched: &AggSchedule,
    batch: usize,
    tol: f64,
    max_iter: usize,
) -> Result<MsSolution> {
    let candidates = feasible_candidates(params, profile, topo, sched, batch)?;
    let parametric = |lambda: f64| first_argmin(candidates.iter().map(|c| c.numer - lambda * c.denom));

    let (mut current, _) = parametric(0.0);
    let mut history = Vec::new();
    for iter in 1..=max_iter {
        let lambda = candidates[current].numer / candidates[current].denom;
        history.push(lambda);
        let (next, value) = parametric(lambda);
        let scale = candidates[next].numer.abs().max(f64::MIN_POSITIVE);
        if value.abs() <= tol * scale || next == current {
            let feasible_count = candidates.len();
            let best = candidates.into_iter().nth(next).expect("index from the same list");
            return Ok(MsSolution {
                objective: best.numer / best.denom,
                cut: best.cut,
                tight_t: best.aux,
                feasible_count,
                method: MsMethod::Dinkelbach,
                dinkelbach_iters: iter,
                lambda_history: history,
            });
        }
        current = next;
    }
    Err(HsflError::NonConvergence {
        iterations: max_iter,
        detail: "Dinkelbach parameter did not settle".to_string(),
        last_iterate: history,
    })
}

/// Default Dinkelbach tolerance relative to the numerator.
pub const DINKELBACH_TOL: f64 = 1e-12;
pub const DINKELBACH_MAX_ITER: usize = 100;

pub fn solve_ms(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    sched: &AggSchedule,
    batch: usize,
    method: MsMethod,
) -> Result<MsSolution> {
    match method {
        MsMethod::Enumeration => solve_ms_enumeration(params, profile, topo, sched, batch),
        MsMethod::Dinkelbach => solve_ms_dinkelbach(params, profile, topo, sched, batch, DINKELBACH_TOL, DINKELBACH_MAX_ITER),
    }
}
