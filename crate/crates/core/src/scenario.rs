//! Scenario files and the reports built on them: plan evaluation and capacity sweeps.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bcd::{run_bcd, BcdOptions};
use crate::convergence::{bound_rhs, rounds_continuous, rounds_for_accuracy, theta_prime, BoundTails, ConvergenceParams};
use crate::error::{HsflError, Result};
use crate::latency;
use crate::ma::MaOptions;
use crate::ms::{memory_demand, objective_constants, MsMethod};
use crate::plan::Plan;
use crate::profile::ModelProfile;
use crate::topology::{build_paper_scenario, paper_scenario, Topology};

/// Where the topology comes from: a file or the seeded evaluation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_seed: Option<u64>,
}

impl Default for TopologySource {
    fn default() -> Self {
        TopologySource { path: None, paper_seed: Some(0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSection {
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub vartheta: f64,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection { beta: 1.0, gamma: paper_scenario::LEARNING_RATE, epsilon: 0.01, vartheta: 2.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub method: MsMethod,
    pub bcd_threshold: f64,
    pub bcd_max_outer: usize,
    pub ma_tol: f64,
    pub ma_max_iter: usize,
    pub interval_cap: u64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let bcd = BcdOptions::default();
        SolverSection {
            method: bcd.ms_method,
            bcd_threshold: bcd.threshold,
            bcd_max_outer: bcd.max_outer,
            ma_tol: bcd.ma.tol,
            ma_max_iter: bcd.ma.max_iter,
            interval_cap: bcd.ma.interval_cap,
        }
    }
}

/// Contents of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Builtin profile name or path to a profile file.
    pub profile: String,
    #[serde(default)]
    pub topology: TopologySource,
    pub batch: usize,
    #[serde(default)]
    pub convergence: ConvergenceSection,
    #[serde(default)]
    pub solver: SolverSection,
    /// Output directory; not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            profile: "vgg16".into(),
            topology: TopologySource::default(),
            batch: paper_scenario::BATCH,
            convergence: ConvergenceSection::default(),
            solver: SolverSection::default(),
            output_dir: None,
        }
    }
}

fn relative_to(base: &Path, p: &str) -> String {
    let path = Path::new(p);
    if path.is_absolute() {
        return p.to_string();
    }
    let joined: PathBuf = base.join(path);
    if joined.exists() {
        joined.display().to_string()
    } else {
        p.to_string()
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HsflError::Parse(e.to_string()))
    }

    /// Loads a scenario file; relative file references resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HsflError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.profile = relative_to(base, &cfg.profile);
        if let Some(p) = &cfg.topology.path {
            cfg.topology.path = Some(relative_to(base, p));
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match (&self.topology.path, self.topology.paper_seed) {
            (Some(_), Some(_)) => problems.push("topology: give either path or paper_seed, not both".to_string()),
            (None, None) => problems.push("topology: one of path or paper_seed is required".to_string()),
            _ => {}
        }
        if self.batch == 0 {
            problems.push("batch must be >= 1".into());
        }
        let s = &self.solver;
        if !(s.bcd_threshold > 0.0) {
            problems.push(format!("solver.bcd_threshold = {} must be > 0", s.bcd_threshold));
        }
        if s.bcd_max_outer == 0 || s.ma_max_iter == 0 {
            problems.push("solver iteration caps must be >= 1".into());
        }
        if !(s.ma_tol > 0.0 && s.ma_tol < 1.0) {
            problems.push(format!("solver.ma_tol = {} must lie in (0, 1)", s.ma_tol));
        }
        if s.interval_cap < 2 {
            problems.push(format!("solver.interval_cap = {} must be >= 2", s.interval_cap));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HsflError::Validation(problems))
        }
    }

    /// Loads the referenced profile and topology and checks every input.
    pub fn resolve(&self) -> Result<Scenario> {
        self.validate()?;
        let profile = ModelProfile::resolve(&self.profile)?;
        let topology = match (&self.topology.path, self.topology.paper_seed) {
            (Some(p), None) => Topology::load(p)?,
            (None, Some(seed)) => build_paper_scenario(seed),
            _ => unreachable!("validated above"),
        };
        let c = self.convergence;
        let params = ConvergenceParams {
            beta: c.beta,
            gamma: c.gamma,
            epsilon: c.epsilon,
            vartheta: c.vartheta,
            num_clients: topology.num_clients(),
        };
        params.validate()?;
        let s = self.solver;
        let options = BcdOptions {
            threshold: s.bcd_threshold,
            max_outer: s.bcd_max_outer,
            ma: MaOptions { tol: s.ma_tol, max_iter: s.ma_max_iter, interval_cap: s.interval_cap },
            ms_method: s.method,
        };
        Ok(Scenario { profile, topology, batch: self.batch, params, options })
    }

    /// The config with the output directory removed, the part that determines results.
    pub fn hashable(&self) -> ScenarioConfig {
        ScenarioConfig { output_dir: None, ..self.clone() }
    }
}

/// A loaded, validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub profile: ModelProfile,
    pub topology: Topology,
    pub batch: usize,
    pub params: ConvergenceParams,
    pub options: BcdOptions,
}

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn config_hash(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config is serializable");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryCheck {
    pub tier: usize,
    pub entity: usize,
    pub demand_bytes: f64,
    /// `None` for an unlimited budget.
    pub budget_bytes: Option<f64>,
    pub feasible: bool,
}

/// Everything known about one plan in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub plan: Plan,
    pub tails: BoundTails,
    /// `ε − variance − drift`; positive when the accuracy target is reachable.
    pub accuracy_margin: f64,
    pub rounds: Option<u64>,
    pub rounds_continuous: Option<f64>,
    pub theta_prime: Option<f64>,
    pub split_round_latency: f64,
    pub aggregation_latency: Vec<f64>,
    pub total_latency: Option<f64>,
    pub memory: Vec<MemoryCheck>,
    pub feasible: bool,
}

pub fn evaluate(scenario: &Scenario, plan: &Plan) -> Result<EvaluationReport> {
    let Scenario { profile, topology: topo, batch, params, .. } = scenario;
    let (cut, sched) = (&plan.cut, &plan.intervals);
    if cut.num_tiers() != topo.num_tiers() || sched.num_tiers() != topo.num_tiers() {
        return Err(HsflError::invalid(format!(
            "plan has {} cuts and {} intervals; the topology needs {} of each",
            cut.cuts().len(),
            sched.intervals().len(),
            topo.num_tiers() - 1
        )));
    }
    let tails = bound_rhs(params, profile, cut, sched)?;
    let split_round = latency::split_round_latency(profile, topo, cut, *batch)?;
    let aggregation = (0..topo.num_tiers() - 1)
        .map(|m| latency::aggregation_latency(profile, topo, cut, m))
        .collect::<Result<Vec<_>>>()?;
    let mut memory = Vec::new();
    for m in 0..topo.num_tiers() - 1 {
        for j in 0..topo.entities_in(m) {
            let demand = memory_demand(profile, topo, cut, *batch, m, j)?;
            let budget = topo.entity(m, j).memory_bytes;
            memory.push(MemoryCheck {
                tier: m,
                entity: j,
                demand_bytes: demand,
                budget_bytes: budget.is_finite().then_some(budget),
                feasible: demand < budget,
            });
        }
    }
    let accuracy_margin = tails.margin(params);
    let reachable = accuracy_margin > 0.0;
    let (rounds, rounds_cont, theta, total) = if reachable {
        let r = rounds_for_accuracy(params, profile, cut, sched)?;
        let consts = objective_constants(params, profile, topo, cut, *batch)?;
        (
            Some(r),
            Some(rounds_continuous(params, &tails)?),
            Some(theta_prime(params, &consts, sched)?),
            Some(latency::total_latency(profile, topo, cut, sched, *batch, r)?),
        )
    } else {
        (None, None, None, None)
    };
    let feasible = reachable && memory.iter().all(|c| c.feasible);
    Ok(EvaluationReport {
        plan: plan.clone(),
        tails,
        accuracy_margin,
        rounds,
        rounds_continuous: rounds_cont,
        theta_prime: theta,
        split_round_latency: split_round,
        aggregation_latency: aggregation,
        total_latency: total,
        memory,
        feasible,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Compute,
    Communication,
}

impl std::str::FromStr for SweepAxis {
    type Err = HsflError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compute" => Ok(SweepAxis::Compute),
            "communication" => Ok(SweepAxis::Communication),
            other => Err(HsflError::Parse(format!("unknown sweep axis {other:?}; expected compute or communication"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Compute => "compute",
            SweepAxis::Communication => "communication",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub coefficient: f64,
    /// `None` when no feasible plan exists at this point.
    pub plan: Option<Plan>,
    pub theta_prime: Option<f64>,
    pub rounds: Option<u64>,
    pub total_latency: Option<f64>,
    pub converged: bool,
    /// Why the point has no plan.
    pub error: Option<String>,
}

fn sweep_point(scenario: &Scenario, axis: SweepAxis, coefficient: f64) -> Result<SweepPoint> {
    let topo = match axis {
        SweepAxis::Compute => scenario.topology.scaled(coefficient, 1.0),
        SweepAxis::Communication => scenario.topology.scaled(1.0, coefficient),
    };
    let s = &scenario;
    let trace = run_bcd(&s.params, &s.profile, &topo, s.batch, None, &s.options)?;
    let rounds = rounds_for_accuracy(&s.params, &s.profile, &trace.plan.cut, &trace.plan.intervals)?;
    let total = latency::total_latency(&s.profile, &topo, &trace.plan.cut, &trace.plan.intervals, s.batch, rounds)?;
    Ok(SweepPoint {
        coefficient,
        theta_prime: Some(trace.objective),
        rounds: Some(rounds),
        total_latency: Some(total),
        converged: trace.converged,
        plan: Some(trace.plan),
        error: None,
    })
}

/// Re-optimizes the plan with the chosen capacities scaled by each
/// coefficient. Points come back sorted by coefficient; infeasible points
/// carry their error instead of a plan.
pub fn run_sweep(scenario: &Scenario, axis: SweepAxis, coefficients: &[f64]) -> Result<Vec<SweepPoint>> {
    if let Some(bad) = coefficients.iter().find(|&&c| !(c > 0.0 && c.is_finite())) {
        return Err(HsflError::invalid(format!("sweep coefficient {bad} must be positive and finite")));
    }
    let mut sorted = coefficients.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted
        .par_iter()
        .map(|&c| match sweep_point(scenario, axis, c) {
            Ok(p) => Ok(p),
            Err(e @ (HsflError::Infeasible { .. } | HsflError::NonConvergence { .. })) => Ok(SweepPoint {
                coefficient: c,
                plan: None,
                theta_prime: None,
                rounds: None,
                total_latency: None,
                converged: false,
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        })
        .collect()
}
