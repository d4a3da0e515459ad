//! The convergence bound with the round count it implies, plus the latency
//! objectives built on them.

use serde::{Deserialize, Serialize};

use crate::error::{HsflError, Result};
use crate::latency::{self, check_plan, check_schedule};
use crate::plan::{AggSchedule, CutVector};
use crate::profile::ModelProfile;
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceParams {
    /// Smoothness constant β.
    pub beta: f64,
    /// Learning rate γ, `0 < γ ≤ 1/β`.
    pub gamma: f64,
    /// Target average squared gradient norm ε.
    pub epsilon: f64,
    /// Initial optimality gap ϑ = f(w̄⁰) − f*.
    pub vartheta: f64,
    pub num_clients: usize,
}

impl ConvergenceParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.beta > 0.0) {
            problems.push(format!("beta = {} must be > 0", self.beta));
        }
        if !(self.gamma > 0.0) || self.gamma * self.beta > 1.0 + 1e-12 {
            problems.push(format!("gamma = {} must satisfy 0 < gamma <= 1/beta", self.gamma));
        }
        if !(self.epsilon > 0.0) {
            problems.push(format!("epsilon = {} must be > 0", self.epsilon));
        }
        if !(self.vartheta > 0.0) {
            problems.push(format!("vartheta = {} must be > 0", self.vartheta));
        }
        if self.num_clients == 0 {
            problems.push("num_clients must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HsflError::Validation(problems))
        }
    }

    /// `4β²γ²`, the drift coefficient.
    pub fn drift_coefficient(&self) -> f64 {
        4.0 * self.beta * self.beta * self.gamma * self.gamma
    }

    /// `βγ Σσ² / N`.
    pub fn variance_tail(&self, profile: &ModelProfile) -> f64 {
        self.beta * self.gamma * profile.total_variance() / self.num_clients as f64
    }
}

/// The R-independent tails of the gradient-norm bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundTails {
    pub variance: f64,
    pub drift: f64,
    /// Drift contribution of each tier below the top.
    pub drift_per_tier: Vec<f64>,
}

impl BoundTails {
    /// The full right-hand side for `rounds` rounds.
    pub fn with_rounds(&self, params: &ConvergenceParams, rounds: u64) -> f64 {
        2.0 * params.vartheta / (params.gamma * rounds as f64) + self.variance + self.drift
    }

    /// `ε − variance − drift`; the plan is feasible iff this is positive.
    pub fn margin(&self, params: &ConvergenceParams) -> f64 {
        params.epsilon - self.variance - self.drift
    }
}

/// `G̃²_{c_{m+1}} − G̃²_{c_m}` for every tier below the top.
pub fn tier_second_moments(profile: &ModelProfile, cut: &CutVector) -> Result<Vec<f64>> {
    (0..cut.num_tiers() - 1)
        .map(|m| {
            let (lo, hi) = cut.tier_bounds(m, profile.num_layers());
            Ok(profile.cumulative_second_moment(hi)? - profile.cumulative_second_moment(lo)?)
        })
        .collect()
}

fn drift_terms(params: &ConvergenceParams, second_moments: &[f64], intervals: &[u64]) -> Vec<f64> {
    let k = params.drift_coefficient();
    second_moments
        .iter()
        .zip(intervals)
        .map(|(&d, &i)| if i > 1 { k * (i as f64).powi(2) * d } else { 0.0 })
        .collect()
}

pub fn bound_rhs(params: &ConvergenceParams, profile: &ModelProfile, cut: &CutVector, sched: &AggSchedule) -> Result<BoundTails> {
    if sched.num_tiers() != cut.num_tiers() {
        return Err(HsflError::invalid("schedule and cut vector disagree on tier count"));
    }
    let d = tier_second_moments(profile, cut)?;
    let drift_per_tier = drift_terms(params, &d, sched.intervals());
    Ok(BoundTails {
        variance: params.variance_tail(profile),
        drift: drift_per_tier.iter().sum(),
        drift_per_tier,
    })
}

fn infeasible(tails: &BoundTails, params: &ConvergenceParams) -> HsflError {
    HsflError::Infeasible {
        reason: format!(
            "target accuracy {:.6e} not above variance tail {:.6e} + drift tail {:.6e}",
            params.epsilon, tails.variance, tails.drift
        ),
        margin: tails.margin(params),
        tier_terms: tails.drift_per_tier.clone(),
    }
}

/// Continuous round count `2ϑ / (γ(ε − tails))`.
pub fn rounds_continuous(params: &ConvergenceParams, tails: &BoundTails) -> Result<f64> {
    let margin = tails.margin(params);
    if !(margin > 0.0) {
        return Err(infeasible(tails, params));
    }
    Ok(2.0 * params.vartheta / (params.gamma * margin))
}

/// Smallest integer `R` meeting the target accuracy.
pub fn rounds_for_accuracy(params: &ConvergenceParams, profile: &ModelProfile, cut: &CutVector, sched: &AggSchedule) -> Result<u64> {
    let tails = bound_rhs(params, profile, cut, sched)?;
    let r = rounds_continuous(params, &tails)?;
    Ok(r.ceil().max(1.0) as u64)
}

/// Θ: estimated time to reach the target accuracy, with `⌊R/I⌋ ≈ R/I`.
pub fn theta(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    cut: &CutVector,
    sched: &AggSchedule,
    batch: usize,
) -> Result<f64> {
    check_plan(profile, topo, cut)?;
    check_schedule(topo, sched)?;
    let tails = bound_rhs(params, profile, cut, sched)?;
    let rounds = rounds_continuous(params, &tails)?;
    let mut per_round = latency::split_round_latency(profile, topo, cut, batch)?;
    for m in 0..topo.num_tiers() - 1 {
        per_round += latency::aggregation_latency(profile, topo, cut, m)? / sched.interval(m) as f64;
    }
    Ok(rounds * per_round)
}

/// Constants of Θ′ at a fixed cut: `a = T_1`, `b_m = T_{m,2} + T_{m,3}`,
/// `c = ε − βγΣσ²/N`, `d_m` the tier's second-moment sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveConstants {
    pub a: f64,
    pub b: Vec<f64>,
    pub c: f64,
    pub d: Vec<f64>,
}

impl ObjectiveConstants {
    pub fn num_tiers(&self) -> usize {
        self.b.len() + 1
    }

    /// `e_m = Π_{k∈free} I_k / I_m` for a free tier `m`.
    pub fn e(free_intervals: &[f64], m: usize) -> f64 {
        free_intervals
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != m)
            .map(|(_, &i)| i)
            .product()
    }
}

/// Numerator and denominator of Θ′ for the given intervals.
pub fn theta_prime_parts(params: &ConvergenceParams, consts: &ObjectiveConstants, intervals: &[u64]) -> (f64, f64) {
    let k = params.drift_coefficient();
    let mut numer = consts.a;
    let mut drift = 0.0;
    for (m, &i) in intervals.iter().enumerate() {
        numer += consts.b[m] / i as f64;
        if i > 1 {
            drift += consts.d[m] * (i as f64).powi(2);
        }
    }
    (2.0 * params.vartheta * numer, params.gamma * (consts.c - k * drift))
}

/// Θ′ at tight auxiliary latencies.
pub fn theta_prime(params: &ConvergenceParams, consts: &ObjectiveConstants, sched: &AggSchedule) -> Result<f64> {
    if sched.num_tiers() != consts.num_tiers() {
        return Err(HsflError::invalid("schedule and objective constants disagree on tier count"));
    }
    let (numer, denom) = theta_prime_parts(params, consts, sched.intervals());
    if !(denom > 0.0) {
        let k = params.drift_coefficient();
        let tier_terms: Vec<f64> = consts
            .d
            .iter()
            .zip(sched.intervals())
            .map(|(&d, &i)| if i > 1 { k * d * (i as f64).powi(2) } else { 0.0 })
            .collect();
        return Err(HsflError::Infeasible {
            reason: format!(
                "accuracy slack {:.6e} exhausted by drift {:.6e}",
                consts.c,
                tier_terms.iter().sum::<f64>()
            ),
            margin: denom / params.gamma,
            tier_terms,
        });
    }
    Ok(numer / denom)
}
