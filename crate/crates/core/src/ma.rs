//! Aggregation intervals for a fixed cut.
//!
//! For a set of free tiers (interval above one) the relaxed objective is a
//! ratio of a convex numerator and a concave denominator, so its stationary
//! point is the relaxed optimum. The stationary system is solved by a Jacobi
//! sweep of safeguarded Newton solves. Every subset of tiers pinned to one is
//! tried with its roots rounded down and up.

use rayon::prelude::*;
use serde::Serialize;

use crate::convergence::{theta_prime_parts, ConvergenceParams, ObjectiveConstants};
use crate::error::{HsflError, Result};
use crate::ms::objective_constants;
use crate::plan::{AggSchedule, CutVector};
use crate::profile::ModelProfile;
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaOptions {
    /// Relative tolerance on the Jacobi update and the root residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest interval considered; tiers without drift are sent here.
    pub interval_cap: u64,
}

impl Default for MaOptions {
    fn default() -> Self {
        MaOptions { tol: 1e-9, max_iter: 200, interval_cap: 512 }
    }
}

/// Pieces of one coordinate's stationarity equation with the other
/// coordinates held fixed: `g(I) = 2k·d·S·I³ + 3k·d·b·I² − b·D≠`.
#[derive(Debug, Clone, Copy)]
struct Coordinate {
    /// `S = a + Σ_{m≠m'} b_m / I_m`.
    s: f64,
    /// `D≠ = c − k Σ_{free m≠m'} d_m I_m²`.
    d_other: f64,
    b: f64,
    d: f64,
    k: f64,
    /// `e' = Π_{free k≠m'} I_k`.
    e: f64,
}

impl Coordinate {
    fn new(params: &ConvergenceParams, consts: &ObjectiveConstants, intervals: &[f64], free: &[bool], m: usize) -> Self {
        let k = params.drift_coefficient();
        let mut s = consts.a;
        let mut d_other = consts.c;
        let mut e = 1.0;
        for (i, &iv) in intervals.iter().enumerate() {
            if i == m {
                continue;
            }
            s += consts.b[i] / iv;
            if free[i] {
                d_other -= k * consts.d[i] * iv * iv;
                e *= iv;
            }
        }
        Coordinate { s, d_other, b: consts.b[m], d: consts.d[m], k, e }
    }

    fn g(&self, x: f64) -> f64 {
        2.0 * self.k * self.d * self.s * x.powi(3) + 3.0 * self.k * self.d * self.b * x * x - self.b * self.d_other
    }

    fn g_prime(&self, x: f64) -> f64 {
        6.0 * self.k * self.d * x * (self.s * x + self.b)
    }

    /// `|Ξ|` at zero, the natural magnitude of the residual.
    fn scale(&self) -> f64 {
        (self.e * self.e * self.b * self.d_other).abs()
    }

    /// The positive root of `g`, or zero when `b = 0`.
    fn root(&self) -> f64 {
        if self.b == 0.0 {
            return 0.0;
        }
        let cubic = 2.0 * self.k * self.d * self.s;
        let quad = 3.0 * self.k * self.d * self.b;
        let target = self.b * self.d_other;
        let mut hi = f64::INFINITY;
        if cubic > 0.0 {
            hi = hi.min((target / cubic).cbrt());
        }
        if quad > 0.0 {
            hi = hi.min((target / quad).sqrt());
        }
        safeguarded_newton(|x| self.g(x), |x| self.g_prime(x), 0.0, hi)
    }
}

/// Newton's method on an increasing function with `f(lo) < 0 ≤ f(hi)`,
/// falling back to bisection whenever a step leaves the bracket.
fn safeguarded_newton(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut x = hi;
    for _ in 0..200 {
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = df(x);
        let newton = x - fx / slope;
        let next = if slope > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) || hi - lo <= 4.0 * f64::EPSILON * hi {
            return next;
        }
        x = next;
    }
    x
}

/// `Ξ` for free tier `m` at `intervals`; pinned tiers must hold 1 and are
/// marked `false` in `free`.
pub fn xi(params: &ConvergenceParams, consts: &ObjectiveConstants, intervals: &[f64], free: &[bool], m: usize) -> f64 {
    let c = Coordinate::new(params, consts, intervals, free, m);
    c.e * c.e * c.g(intervals[m])
}

/// `∂Ξ/∂I_m`.
pub fn xi_derivative(params: &ConvergenceParams, consts: &ObjectiveConstants, intervals: &[f64], free: &[bool], m: usize) -> f64 {
    let c = Coordinate::new(params, consts, intervals, free, m);
    c.e * c.e * c.g_prime(intervals[m])
}

/// `|Ξ|` at `I_m = 0`, used to make residuals scale-free.
pub fn xi_scale(params: &ConvergenceParams, consts: &ObjectiveConstants, intervals: &[f64], free: &[bool], m: usize) -> f64 {
    Coordinate::new(params, consts, intervals, free, m).scale()
}

fn denominator(params: &ConvergenceParams, consts: &ObjectiveConstants, intervals: &[f64], free: &[bool]) -> f64 {
    let k = params.drift_coefficient();
    consts.c
        - intervals
            .iter()
            .zip(free)
            .zip(&consts.d)
            .filter(|((_, &f), _)| f)
            .map(|((&i, _), &d)| k * d * i * i)
            .sum::<f64>()
}

/// Outcome of the continuous stationarity solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuousRoots {
    /// One entry per tier below the top; pinned tiers hold 1.
    pub intervals: Vec<f64>,
    pub iterations: usize,
}

/// Solves the stationarity system over the `free` tiers; all other tiers are
/// held at 1. Free tiers with zero second moment are sent to `interval_cap`.
pub fn newton_jacobi(
    params: &ConvergenceParams,
    consts: &ObjectiveConstants,
    free: &[bool],
    opts: &MaOptions,
) -> Result<ContinuousRoots> {
    let tiers = consts.b.len();
    if free.len() != tiers || consts.d.len() != tiers {
        return Err(HsflError::invalid("free-tier mask does not match the objective constants"));
    }
    if !(consts.c > 0.0) {
        return Err(HsflError::Infeasible {
            reason: format!("accuracy slack {:.6e} after the variance tail is not positive", consts.c),
            margin: consts.c,
            tier_terms: Vec::new(),
        });
    }
    let cap = opts.interval_cap as f64;
    let k = params.drift_coefficient();
    let active = |m: usize| free[m] && consts.d[m] > 0.0;

    let mut x: Vec<f64> = (0..tiers)
        .map(|m| {
            if !free[m] {
                1.0
            } else if consts.d[m] <= 0.0 {
                cap
            } else {
                (consts.b[m] * consts.c / (2.0 * k * consts.a.max(f64::MIN_POSITIVE) * consts.d[m]))
                    .cbrt()
                    .clamp(1.0, cap)
            }
        })
        .collect();
    let mut shrink = 0;
    while !(denominator(params, consts, &x, free) > 0.0) {
        for m in (0..tiers).filter(|&m| active(m)) {
            x[m] *= 0.5;
        }
        shrink += 1;
        if shrink > 1100 {
            return Err(HsflError::Infeasible {
                reason: "capped drift-free tiers exhaust the accuracy slack".to_string(),
                margin: denominator(params, consts, &x, free),
                tier_terms: Vec::new(),
            });
        }
    }

    for iter in 1..=opts.max_iter {
        let target: Vec<f64> = (0..tiers)
            .map(|m| if active(m) { Coordinate::new(params, consts, &x, free, m).root() } else { x[m] })
            .collect();
        let mut step = 1.0;
        let mut next: Vec<f64> = x.iter().zip(&target).map(|(&a, &t)| a + step * (t - a)).collect();
        while !(denominator(params, consts, &next, free) > 0.0) {
            step *= 0.5;
            next = x.iter().zip(&target).map(|(&a, &t)| a + step * (t - a)).collect();
        }
        let update = x
            .iter()
            .zip(&next)
            .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
            .fold(0.0, f64::max);
        x = next;
        if update <= opts.tol {
            return Ok(ContinuousRoots { intervals: x, iterations: iter });
        }
    }
    Err(HsflError::NonConvergence {
        iterations: opts.max_iter,
        detail: "stationarity system did not settle".to_string(),
        last_iterate: x,
    })
}

/// Floor and ceiling of every free root, clamped to `[2, cap]`, as a sorted
/// deduplicated list of full interval vectors; pinned tiers stay at 1.
pub fn round_candidates(roots: &[f64], free: &[bool], cap: u64) -> Vec<Vec<u64>> {
    let choices: Vec<Vec<u64>> = roots
        .iter()
        .zip(free)
        .map(|(&r, &f)| {
            if !f {
                return vec![1];
            }
            let mut v = vec![(r.floor() as u64).clamp(2, cap.max(2)), (r.ceil() as u64).clamp(2, cap.max(2))];
            v.dedup();
            v
        })
        .collect();
    let mut out = vec![Vec::with_capacity(roots.len())];
    for options in &choices {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                options.iter().map(move |&o| {
                    let mut p = prefix.clone();
                    p.push(o);
                    p
                })
            })
            .collect();
    }
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaSolution {
    pub intervals: AggSchedule,
    pub objective: f64,
    /// Tiers pinned to interval 1 in the winning subset.
    pub fixed_to_one: Vec<usize>,
    /// Relaxed roots of the winning subset; `None` for pinned tiers.
    pub continuous_roots: Vec<Option<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

struct SubsetOutcome {
    free: Vec<bool>,
    roots: Vec<f64>,
    iterations: usize,
    converged: bool,
    best: Option<(Vec<u64>, f64)>,
}

fn better(candidate: (&[u64], f64), incumbent: Option<&(Vec<u64>, f64)>) -> bool {
    match incumbent {
        None => true,
        Some((iv, obj)) => candidate.1 < *obj || (candidate.1 == *obj && candidate.0 < iv.as_slice()),
    }
}

fn solve_subset(params: &ConvergenceParams, consts: &ObjectiveConstants, free: Vec<bool>, opts: &MaOptions) -> Result<SubsetOutcome> {
    let (roots, iterations, converged) = if free.iter().any(|&f| f) {
        match newton_jacobi(params, consts, &free, opts) {
            Ok(r) => (r.intervals, r.iterations, true),
            Err(HsflError::NonConvergence { iterations, last_iterate, .. }) => {
                log::warn!("interval solve did not converge for free tiers {free:?}; rounding the last iterate");
                (last_iterate, iterations, false)
            }
            Err(HsflError::Infeasible { .. }) => {
                return Ok(SubsetOutcome { roots: vec![1.0; free.len()], free, iterations: 0, converged: true, best: None })
            }
            Err(e) => return Err(e),
        }
    } else {
        (vec![1.0; free.len()], 0, true)
    };
    let mut best: Option<(Vec<u64>, f64)> = None;
    for cand in round_candidates(&roots, &free, opts.interval_cap) {
        let (numer, denom) = theta_prime_parts(params, consts, &cand);
        if !(denom > 0.0) {
            continue;
        }
        let obj = numer / denom;
        if better((&cand, obj), best.as_ref()) {
            best = Some((cand, obj));
        }
    }
    Ok(SubsetOutcome { free, roots, iterations, converged, best })
}

/// Optimal intervals for fixed objective constants. `pinned[m]` forces tier
/// `m` to interval 1 in every subset.
pub fn solve_ma(params: &ConvergenceParams, consts: &ObjectiveConstants, pinned: &[bool], opts: &MaOptions) -> Result<MaSolution> {
    let tiers = consts.b.len();
    if pinned.len() != tiers {
        return Err(HsflError::invalid("pinned-tier mask does not match the objective constants"));
    }
    let open: Vec<usize> = (0..tiers).filter(|&m| !pinned[m]).collect();
    if open.len() > 20 {
        return Err(HsflError::invalid("too many tiers for subset enumeration"));
    }
    let outcomes: Vec<Result<SubsetOutcome>> = (0u32..1 << open.len())
        .into_par_iter()
        .map(|mask| {
            let mut free = vec![false; tiers];
            for (bit, &m) in open.iter().enumerate() {
                free[m] = mask & (1 << bit) == 0;
            }
            solve_subset(params, consts, free, opts)
        })
        .collect();

    let mut winner: Option<SubsetOutcome> = None;
    for outcome in outcomes {
        let outcome = outcome?;
        let Some(best) = &outcome.best else { continue };
        let incumbent = winner.as_ref().and_then(|w| w.best.as_ref());
        if better((&best.0, best.1), incumbent) {
            winner = Some(outcome);
        }
    }
    let Some(w) = winner else {
        return Err(HsflError::Infeasible {
            reason: "no interval schedule leaves a positive accuracy slack".to_string(),
            margin: consts.c,
            tier_terms: Vec::new(),
        });
    };
    let (intervals, objective) = w.best.expect("winner has a candidate");
    Ok(MaSolution {
        intervals: AggSchedule::new(intervals)?,
        objective,
        fixed_to_one: (0..tiers).filter(|&m| !w.free[m]).collect(),
        continuous_roots: w.roots.iter().zip(&w.free).map(|(&r, &f)| f.then_some(r)).collect(),
        iterations: w.iterations,
        converged: w.converged,
    })
}

/// Tiers with a single entity never pay for fed-server transfers.
pub fn single_entity_tiers(topo: &Topology) -> Vec<bool> {
    (0..topo.num_tiers() - 1).map(|m| topo.entities_in(m) <= 1).collect()
}

/// [`solve_ma`] with constants evaluated at `cut`.
pub fn solve_ma_for_cut(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    cut: &CutVector,
    batch: usize,
    opts: &MaOptions,
) -> Result<MaSolution> {
    let consts = objective_constants(params, profile, topo, cut, batch)?;
    solve_ma(params, &consts, &single_entity_tiers(topo), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> ConvergenceParams {
        ConvergenceParams { beta: 1.0, gamma: 1.0, epsilon: 1.0, vartheta: 1.0, num_clients: 1 }
    }

    fn consts(a: f64, b: Vec<f64>, c: f64, d: Vec<f64>) -> ObjectiveConstants {
        ObjectiveConstants { a, b, c, d }
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn xi_at_zero_is_negative() {
        let p = ConvergenceParams { beta: 2.0, gamma: 0.1, ..unit_params() };
        let k = consts(1.0, vec![2.0, 3.0], 5.0, vec![1.0, 0.5]);
        let free = [true, true];
        let v = xi(&p, &k, &[0.0, 4.0], &free, 0);
        let expected = -(4.0f64.powi(2)) * 2.0 * (5.0 - 4.0 * 4.0 * 0.01 * 0.5 * 16.0);
        assert!((v - expected).abs() < 1e-12);
        assert!(v < 0.0);
    }

    #[test]
    fn single_tier_cubic() {
        let p = unit_params();
        let k = consts(1.0, vec![1.0], 1000.0, vec![1.0]);
        let free = [true];
        let oracle = bisect(|x| 8.0 * x.powi(3) + 12.0 * x * x - 1000.0, 0.0, 100.0);
        assert!((oracle - 4.5).abs() < 0.1);
        let r = newton_jacobi(&p, &k, &free, &MaOptions::default()).unwrap();
        assert!((r.intervals[0] - oracle).abs() < 1e-9 * oracle);
        let res = xi(&p, &k, &r.intervals, &free, 0);
        assert!(res.abs() <= 1e-9 * xi_scale(&p, &k, &r.intervals, &free, 0));
        for x in [0.5, 1.0, 3.0, 4.0, 10.0] {
            assert!(xi(&p, &k, &[x + 1.0], &free, 0) > xi(&p, &k, &[x], &free, 0));
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let p = ConvergenceParams { beta: 1.5, gamma: 0.2, ..unit_params() };
        let k = consts(2.0, vec![1.0, 3.0, 0.5], 2.0, vec![0.3, 0.1, 0.2]);
        let free = [true, false, true];
        let x = [3.0, 1.0, 2.5];
        let h = 1e-6;
        for m in [0, 2] {
            let mut up = x;
            let mut dn = x;
            up[m] += h;
            dn[m] -= h;
            let fd = (xi(&p, &k, &up, &free, m) - xi(&p, &k, &dn, &free, m)) / (2.0 * h);
            let an = xi_derivative(&p, &k, &x, &free, m);
            assert!((fd - an).abs() <= 1e-6 * an.abs());
        }
    }

    #[test]
    fn symmetric_tiers_share_a_root() {
        let p = ConvergenceParams { gamma: 0.05, ..unit_params() };
        let k = consts(1.0, vec![2.0, 2.0], 1.0, vec![1.0, 1.0]);
        let r = newton_jacobi(&p, &k, &[true, true], &MaOptions::default()).unwrap();
        assert!((r.intervals[0] - r.intervals[1]).abs() <= 1e-9 * r.intervals[0]);
    }

    #[test]
    fn larger_transfer_cost_gets_longer_interval() {
        let p = ConvergenceParams { gamma: 0.05, ..unit_params() };
        let k = consts(1.0, vec![5.0, 1.0], 1.0, vec![1.0, 1.0]);
        let r = newton_jacobi(&p, &k, &[true, true], &MaOptions::default()).unwrap();
        assert!(r.intervals[0] > r.intervals[1]);
        for m in 0..2 {
            let s = xi_scale(&p, &k, &r.intervals, &[true, true], m);
            assert!(xi(&p, &k, &r.intervals, &[true, true], m).abs() <= 1e-9 * s);
        }
    }

    #[test]
    fn zero_second_moment_goes_to_cap() {
        let p = ConvergenceParams { gamma: 0.05, ..unit_params() };
        let k = consts(1.0, vec![1.0, 1.0], 1.0, vec![0.0, 1.0]);
        let opts = MaOptions { interval_cap: 64, ..MaOptions::default() };
        let r = newton_jacobi(&p, &k, &[true, true], &opts).unwrap();
        assert_eq!(r.intervals[0], 64.0);
        let s = solve_ma(&p, &k, &[false, false], &opts).unwrap();
        assert_eq!(s.intervals.interval(0), 64);
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_candidates(&[4.5, 2.2], &[true, true], 512), vec![vec![4, 2], vec![4, 3], vec![5, 2], vec![5, 3]]);
        assert_eq!(round_candidates(&[3.0], &[true], 512), vec![vec![3]]);
        assert_eq!(round_candidates(&[1.2], &[true], 512), vec![vec![2]]);
        assert_eq!(round_candidates(&[7.3, 1.0], &[true, false], 512), vec![vec![7, 1], vec![8, 1]]);
        assert_eq!(round_candidates(&[900.0], &[true], 512), vec![vec![512]]);
    }

    #[test]
    fn free_aggregation_prefers_one() {
        let p = ConvergenceParams { gamma: 0.05, ..unit_params() };
        let k = consts(1.0, vec![0.0], 1.0, vec![1.0]);
        let s = solve_ma(&p, &k, &[false], &MaOptions::default()).unwrap();
        assert_eq!(s.intervals.intervals(), &[1]);
        assert_eq!(s.fixed_to_one, vec![0]);
    }

    #[test]
    fn pinned_tiers_stay_at_one() {
        let p = ConvergenceParams { gamma: 0.05, ..unit_params() };
        let k = consts(1.0, vec![5.0, 0.0], 1.0, vec![1.0, 1.0]);
        let s = solve_ma(&p, &k, &[false, true], &MaOptions::default()).unwrap();
        assert_eq!(s.intervals.interval(1), 1);
        assert!(s.intervals.interval(0) > 1);
        let (n, d) = theta_prime_parts(&p, &k, s.intervals.intervals());
        assert_eq!(s.objective, n / d);
    }

    #[test]
    fn infeasible_slack_is_an_error() {
        let p = unit_params();
        let k = consts(1.0, vec![1.0], -1.0, vec![1.0]);
        assert!(matches!(solve_ma(&p, &k, &[false], &MaOptions::default()), Err(HsflError::Infeasible { .. })));
    }
}
