use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hsfl_core::bcd::{plan_objective, random_baselines, run_bcd, BaselineRanges};
use hsfl_core::convergence::rounds_for_accuracy;
use hsfl_core::latency::{breakdown, total_latency};
use hsfl_core::ma::solve_ma_for_cut;
use hsfl_core::ms::solve_ms;
use hsfl_core::plan::parse_cuts;
use hsfl_core::topology::build_paper_scenario;
use hsfl_core::scenario::{config_hash, evaluate, run_sweep, Scenario, ScenarioConfig};
use hsfl_core::train::{estimate_params, generate_clients, tiny_mlp, train, MixtureConfig, ParamEstimates, SplitNet, TrainConfig, TrainTrace};
use hsfl_core::{AggSchedule, CutVector, HsflError, ModelProfile, Plan, Topology};
use serde::Serialize;
use serde_json::json;

use crate::args::{EstimateArgs, EvaluateArgs, LatencyArgs, OptimizeArgs, ProfileArgs, ScenarioArgs, SweepArgs, TopologyArgs, TrainArgs, TrainSetup};
use crate::output::{append_csv, f, opt, print_json, resolve_out_dir, write_csv};

/// Process exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    Infeasible,
    NotConverged,
}

/// Global options every command sees.
pub struct Globals {
    pub out_dir: Option<PathBuf>,
}

struct Loaded {
    config: ScenarioConfig,
    scenario: Scenario,
    out_dir: PathBuf,
}

fn load(args: &ScenarioArgs, ctx: &Globals) -> Result<Loaded> {
    let config = args.effective()?;
    let scenario = config.resolve()?;
    let out_dir = resolve_out_dir(ctx.out_dir.as_deref(), config.output_dir.as_deref());
    Ok(Loaded { config, scenario, out_dir })
}

fn hash_of(command: &str, config: &ScenarioConfig, extra: serde_json::Value) -> String {
    config_hash(&json!({ "command": command, "scenario": config.hashable(), "args": extra }))
}

fn plan_from(profile: &ModelProfile, cut: &str, intervals: &str) -> Result<Plan> {
    let cut = CutVector::new(parse_cuts(cut)?, profile.num_layers())?;
    let intervals: AggSchedule = intervals.parse()?;
    Ok(Plan { cut, intervals })
}

fn tier_columns(prefix: &str, suffix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|m| format!("{prefix}{m}{suffix}")).collect()
}

#[derive(Clone, Serialize)]
struct PlanSummary {
    plan: Plan,
    theta_prime: f64,
    rounds: u64,
    total_latency: f64,
}

fn summarize(s: &Scenario, topo: &Topology, plan: Plan) -> Result<PlanSummary> {
    let theta_prime = plan_objective(&s.params, &s.profile, topo, &plan, s.batch)?;
    let rounds = rounds_for_accuracy(&s.params, &s.profile, &plan.cut, &plan.intervals)?;
    let total = total_latency(&s.profile, topo, &plan.cut, &plan.intervals, s.batch, rounds)?;
    Ok(PlanSummary { plan, theta_prime, rounds, total_latency: total })
}

pub fn optimize(args: &OptimizeArgs, ctx: &Globals) -> Result<Status> {
    let Loaded { config, scenario: s, out_dir } = load(&args.scenario, ctx)?;
    let seed = args.scenario.seed(&config);
    let hash = hash_of(
        "optimize",
        &config,
        json!({ "fix_cut": args.fix_cut, "fix_intervals": args.fix_intervals, "baselines": args.baselines, "seed": seed }),
    );

    if let Some(cut) = &args.fix_cut {
        let cut = CutVector::new(parse_cuts(cut)?, s.profile.num_layers())?;
        let sol = solve_ma_for_cut(&s.params, &s.profile, &s.topology, &cut, s.batch, &s.options.ma)?;
        let summary = summarize(&s, &s.topology, Plan { cut, intervals: sol.intervals.clone() })?;
        print_json(&json!({ "config_sha256": hash, "interval_solution": sol, "summary": summary }))?;
        eprintln!("intervals {} theta' {:.6e}", sol.intervals, sol.objective);
        return Ok(if sol.converged { Status::Success } else { Status::NotConverged });
    }

    if let Some(iv) = &args.fix_intervals {
        let sched: AggSchedule = iv.parse()?;
        let sol = solve_ms(&s.params, &s.profile, &s.topology, &sched, s.batch, s.options.ms_method)?;
        let summary = summarize(&s, &s.topology, Plan { cut: sol.cut.clone(), intervals: sched })?;
        print_json(&json!({ "config_sha256": hash, "cut_solution": sol, "summary": summary }))?;
        eprintln!("cut {} theta' {:.6e}", sol.cut, sol.objective);
        return Ok(Status::Success);
    }

    let trace = run_bcd(&s.params, &s.profile, &s.topology, s.batch, None, &s.options)?;
    let summary = summarize(&s, &s.topology, trace.plan.clone())?;
    let mut rows = vec![vec![
        "0".to_string(),
        trace.initial.cut.to_string(),
        trace.initial.intervals.to_string(),
        f(trace.initial_objective),
        "false".into(),
    ]];
    rows.extend(trace.records.iter().map(|r| {
        vec![r.iteration.to_string(), r.cut.to_string(), r.intervals.to_string(), f(r.objective), r.kept_intervals.to_string()]
    }));
    let header: Vec<String> = ["iteration", "cut", "intervals", "theta_prime", "kept_intervals"].map(String::from).to_vec();
    write_csv(&out_dir.join("bcd_trace.csv"), &hash, &header, &rows)?;

    let baselines = if args.baselines {
        let b = random_baselines(seed, &s.params, &s.profile, &s.topology, s.batch, &BaselineRanges::default(), &s.options)?;
        let list = vec![
            ("optimized", summary.clone()),
            ("random_intervals", summarize(&s, &s.topology, b.random_ma)?),
            ("random_cut", summarize(&s, &s.topology, b.random_ms)?),
            ("random_both", summarize(&s, &s.topology, b.random_both)?),
        ];
        let header: Vec<String> = ["scheme", "cut", "intervals", "theta_prime", "rounds", "total_latency"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = list
            .iter()
            .map(|(name, p)| {
                vec![name.to_string(), p.plan.cut.to_string(), p.plan.intervals.to_string(), f(p.theta_prime), p.rounds.to_string(), f(p.total_latency)]
            })
            .collect();
        write_csv(&out_dir.join("baselines.csv"), &hash, &header, &rows)?;
        Some(list.into_iter().map(|(name, p)| json!({ "scheme": name, "result": p })).collect::<Vec<_>>())
    } else {
        None
    };

    let mut out = json!({ "config_sha256": hash, "trace": trace, "summary": summary });
    if let Some(b) = baselines {
        out["baselines"] = json!(b);
    }
    print_json(&out)?;
    eprintln!(
        "cut {} intervals {} theta' {:.6e} rounds {} total latency {:.6e} s after {} iterations",
        summary.plan.cut,
        summary.plan.intervals,
        summary.theta_prime,
        summary.rounds,
        summary.total_latency,
        trace.records.len()
    );
    Ok(if trace.converged { Status::Success } else { Status::NotConverged })
}

pub fn latency(args: &LatencyArgs, ctx: &Globals) -> Result<Status> {
    let Loaded { config, scenario: s, out_dir } = load(&args.scenario, ctx)?;
    let plan = plan_from(&s.profile, &args.cut, &args.intervals)?;
    let rounds = match args.rounds {
        Some(r) => r,
        None => rounds_for_accuracy(&s.params, &s.profile, &plan.cut, &plan.intervals)?,
    };
    let b = breakdown(&s.profile, &s.topology, &plan.cut, &plan.intervals, s.batch, rounds)?;
    let hash = hash_of("latency", &config, json!(null));
    let tiers = s.topology.num_tiers();
    let mut header: Vec<String> = ["cut", "intervals", "rounds", "T_S"].map(String::from).to_vec();
    header.extend(tier_columns("T_", "A", tiers - 1));
    header.push("total".into());
    let mut row = vec![plan.cut.to_string(), plan.intervals.to_string(), rounds.to_string(), f(b.split_round)];
    row.extend(b.aggregation.iter().map(|&v| f(v)));
    row.push(f(b.total));
    append_csv(&out_dir.join("latency.csv"), &hash, &header, &row)?;
    print_json(&json!({ "config_sha256": hash, "plan": plan, "breakdown": b }))?;
    Ok(Status::Success)
}

pub fn evaluate_cmd(args: &EvaluateArgs, ctx: &Globals) -> Result<Status> {
    let Loaded { config, scenario: s, .. } = load(&args.scenario, ctx)?;
    let plan = plan_from(&s.profile, &args.cut, &args.intervals)?;
    let hash = hash_of("evaluate", &config, json!({ "cut": plan.cut, "intervals": plan.intervals }));
    let report = evaluate(&s, &plan)?;
    print_json(&json!({ "config_sha256": hash, "report": report }))?;
    if report.feasible {
        Ok(Status::Success)
    } else {
        eprintln!(
            "plan is infeasible: accuracy margin {:.6e}, {} memory violations",
            report.accuracy_margin,
            report.memory.iter().filter(|c| !c.feasible).count()
        );
        Ok(Status::Infeasible)
    }
}

pub fn sweep(args: &SweepArgs, ctx: &Globals) -> Result<Status> {
    let Loaded { config, scenario: s, out_dir } = load(&args.scenario, ctx)?;
    let coefficients: Vec<f64> = args
        .coefficients
        .split(',')
        .map(|c| c.trim().parse::<f64>().with_context(|| format!("bad coefficient {c:?}")))
        .collect::<Result<_>>()?;
    let points = run_sweep(&s, args.axis, &coefficients)?;
    let hash = hash_of("sweep", &config, json!({ "axis": args.axis, "coefficients": coefficients }));
    let header: Vec<String> =
        ["coefficient", "status", "cut", "intervals", "theta_prime", "rounds", "total_latency"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let status = match (&p.plan, p.converged) {
                (None, _) => "infeasible",
                (Some(_), false) => "not_converged",
                (Some(_), true) => "ok",
            };
            vec![
                f(p.coefficient),
                status.into(),
                opt(p.plan.as_ref().map(|x| x.cut.to_string())),
                opt(p.plan.as_ref().map(|x| x.intervals.to_string())),
                opt(p.theta_prime),
                opt(p.rounds),
                opt(p.total_latency),
            ]
        })
        .collect();
    write_csv(&out_dir.join(format!("sweep_{}.csv", args.axis)), &hash, &header, &rows)?;
    print_json(&json!({ "config_sha256": hash, "axis": args.axis, "points": points }))?;
    Ok(Status::Success)
}

struct TrainRun {
    topo: Topology,
    trace: TrainTrace,
}

fn run_training(setup: &TrainSetup, intervals: Option<&str>, rounds: u64, snapshot_every: u64) -> Result<TrainRun> {
    let mlp = tiny_mlp();
    let cut = CutVector::new(parse_cuts(&setup.cut)?, mlp.num_layers())?;
    if cut.num_tiers() != setup.tiers {
        bail!("--cut {} gives {} tiers but --tiers is {}", setup.cut, cut.num_tiers(), setup.tiers);
    }
    let sched = match intervals {
        Some(s) => s.parse()?,
        None => AggSchedule::ones(setup.tiers),
    };
    let topo = Topology::uniform_tree(setup.clients, setup.tiers, setup.fanout)?;
    let mixture = MixtureConfig {
        dim: mlp.input_dim(),
        classes: mlp.num_classes(),
        samples_per_client: setup.samples_per_client,
        separation: setup.separation,
    };
    let data = generate_clients(setup.clients, &mixture, setup.partition, setup.seed)?;
    let mut net = SplitNet::new(mlp, cut, setup.clients, setup.seed)?;
    let cfg = TrainConfig { gamma: setup.gamma, batch: setup.batch, rounds, seed: setup.seed, snapshot_every, ..TrainConfig::default() };
    let trace = train(&mut net, &topo, &data, &sched, &cfg)?;
    Ok(TrainRun { topo, trace })
}

pub fn train_cmd(args: &TrainArgs, ctx: &Globals) -> Result<Status> {
    let TrainRun { topo, trace } = run_training(&args.setup, args.intervals.as_deref(), args.rounds, 0)?;
    let hash = config_hash(&json!({ "command": "train", "args": args }));
    let below_top = topo.num_tiers() - 1;
    let mut header: Vec<String> = vec!["round".into(), "loss_on_aggregate".into()];
    header.extend(tier_columns("div_tier_", "", below_top));
    header.push("agg_events".into());
    let rows: Vec<Vec<String>> = trace
        .rounds
        .iter()
        .map(|r| {
            let mut row = vec![r.round.to_string(), f(r.loss)];
            row.extend(r.divergence[..below_top].iter().map(|&d| f(d)));
            row.push(r.aggregated.iter().map(|m| (m + 1).to_string()).collect::<Vec<_>>().join(";"));
            row
        })
        .collect();
    let out_dir = resolve_out_dir(ctx.out_dir.as_deref(), None);
    write_csv(&out_dir.join("train_trace.csv"), &hash, &header, &rows)?;

    let losses: Vec<f64> = trace.rounds.iter().map(|r| r.loss).collect();
    let aggregations: Vec<usize> = (0..below_top).map(|m| trace.rounds.iter().filter(|r| r.aggregated.contains(&m)).count()).collect();
    let max_divergence: Vec<f64> =
        (0..below_top).map(|m| trace.rounds.iter().map(|r| r.divergence[m]).fold(0.0, f64::max)).collect();
    print_json(&json!({
        "config_sha256": hash,
        "rounds": trace.rounds.len(),
        "initial_loss": trace.initial_loss,
        "final_loss": losses.last().copied(),
        "best_loss": losses.iter().copied().fold(f64::INFINITY, f64::min),
        "aggregations": aggregations,
        "max_divergence": max_divergence,
        "layer_grad_max": trace.layer_grad_max,
    }))?;
    Ok(Status::Success)
}

pub fn estimate(args: &EstimateArgs, ctx: &Globals) -> Result<Status> {
    if args.snapshot_every == 0 {
        bail!("--snapshot-every must be >= 1");
    }
    let TrainRun { trace, .. } = run_training(&args.setup, args.intervals.as_deref(), args.rounds, args.snapshot_every)?;
    let est = estimate_params(&trace.snapshots)?;
    let hash = config_hash(&json!({ "command": "estimate-params", "args": args }));
    let path = match &args.output {
        Some(p) => p.clone(),
        None => resolve_out_dir(ctx.out_dir.as_deref(), None).join("gradient_stats.toml"),
    };
    write_fragment(&path, &hash, &est)?;
    print_json(&json!({ "config_sha256": hash, "estimates": est }))?;
    Ok(Status::Success)
}

fn write_fragment(path: &Path, hash: &str, est: &ParamEstimates) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = format!("# config_sha256={hash}\n{}", est.to_toml_string());
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn profile(args: &ProfileArgs) -> Result<Status> {
    let mut profile = ModelProfile::resolve(&args.profile)?;
    if let Some(frag) = &args.merge {
        profile = ParamEstimates::load(frag)?.apply_to(&profile)?;
    }
    print!("{}", profile.to_toml_string());
    Ok(Status::Success)
}

pub fn topology(args: &TopologyArgs) -> Result<Status> {
    let topo = match &args.topology {
        Some(path) => Topology::load(path)?,
        None => build_paper_scenario(args.seed),
    };
    print!("{}", topo.to_toml_string());
    Ok(Status::Success)
}

/// Exit code for an error that escaped a command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HsflError>() {
        Some(HsflError::Infeasible { .. }) => 3,
        Some(HsflError::NonConvergence { .. }) => 4,
        _ => 2,
    }
}
