use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hsfl_core::scenario::{ScenarioConfig, SweepAxis, TopologySource};
use hsfl_core::train::Partition;
use hsfl_core::MsMethod;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "hsfl", version, about = "Plan and simulate hierarchical split federated learning")]
pub struct Cli {
    /// Worker threads for parallel sections; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Directory for CSV outputs; defaults to the config value, then $HSFL_OUT_DIR, then ./hsfl-out.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// Increase log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize cut layers and aggregation intervals jointly, or one block with the other fixed.
    Optimize(OptimizeArgs),
    /// Latency breakdown of a plan.
    Latency(LatencyArgs),
    /// Convergence and latency report for a plan.
    Evaluate(EvaluateArgs),
    /// Re-optimize while scaling compute or link capacities.
    Sweep(SweepArgs),
    /// Train the desk-scale split MLP on synthetic data.
    Train(TrainArgs),
    /// Train with gradient snapshots and write estimated gradient statistics.
    EstimateParams(EstimateArgs),
    /// Print a model profile, optionally merged with estimated gradient statistics.
    Profile(ProfileArgs),
    /// Print a topology file, e.g. the seeded evaluation scenario as a starting point.
    Topology(TopologyArgs),
}

/// Scenario inputs; flags override values from `--config`.
#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Builtin profile name (vgg16, tinymlp) or profile file.
    #[arg(long)]
    pub profile: Option<String>,
    /// Topology file.
    #[arg(long, conflicts_with = "paper_scenario")]
    pub topology: Option<String>,
    /// Use the seeded 20-device / 5-edge / 1-cloud scenario.
    #[arg(long)]
    pub paper_scenario: bool,
    /// Seed for the generated scenario and any other randomness.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Target average squared gradient norm.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Initial optimality gap.
    #[arg(long)]
    pub vartheta: Option<f64>,
    /// Cut-layer solver: enumeration or dinkelbach.
    #[arg(long)]
    pub method: Option<MsMethod>,
    /// Relative change of the objective that stops the alternating solver.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub interval_cap: Option<u64>,
}

impl ScenarioArgs {
    /// The config file (or defaults) with every given flag applied.
    pub fn effective(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::default(),
        };
        if let Some(p) = &self.profile {
            cfg.profile = p.clone();
        }
        if let Some(t) = &self.topology {
            cfg.topology = TopologySource { path: Some(t.clone()), paper_seed: None };
        } else if self.paper_scenario || (self.seed.is_some() && cfg.topology.paper_seed.is_some()) {
            cfg.topology = TopologySource { path: None, paper_seed: Some(self.seed.unwrap_or(0)) };
        }
        if let Some(b) = self.batch {
            cfg.batch = b;
        }
        let c = &mut cfg.convergence;
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = self.vartheta {
            c.vartheta = v;
        }
        let s = &mut cfg.solver;
        if let Some(m) = self.method {
            s.method = m;
        }
        if let Some(v) = self.threshold {
            s.bcd_threshold = v;
        }
        if let Some(v) = self.max_outer {
            s.bcd_max_outer = v;
        }
        if let Some(v) = self.interval_cap {
            s.interval_cap = v;
        }
        Ok(cfg)
    }

    pub fn seed(&self, cfg: &ScenarioConfig) -> u64 {
        self.seed.or(cfg.topology.paper_seed).unwrap_or(0)
    }
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Keep these cut layers and optimize only the intervals.
    #[arg(long, conflicts_with = "fix_intervals")]
    pub fix_cut: Option<String>,
    /// Keep these intervals and optimize only the cut layers.
    #[arg(long)]
    pub fix_intervals: Option<String>,
    /// Also evaluate the randomized comparison plans.
    #[arg(long, conflicts_with_all = ["fix_cut", "fix_intervals"])]
    pub baselines: bool,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub cut: String,
    #[arg(long)]
    pub intervals: String,
    /// Training rounds; defaults to the round count the accuracy target needs.
    #[arg(long)]
    pub rounds: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub cut: String,
    #[arg(long)]
    pub intervals: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// compute or communication.
    #[arg(long)]
    pub axis: SweepAxis,
    /// Comma-separated positive scaling coefficients.
    #[arg(long, default_value = "0.25,0.5,1,2,4")]
    pub coefficients: String,
}

/// Desk-scale training setup shared by `train` and `estimate-params`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainSetup {
    #[arg(long, default_value_t = 8)]
    pub clients: usize,
    #[arg(long, default_value_t = 3)]
    pub tiers: usize,
    /// Children per entity on intermediate tiers.
    #[arg(long, default_value_t = 4)]
    pub fanout: usize,
    /// Cut layers of the 4-layer MLP.
    #[arg(long, default_value = "1,2")]
    pub cut: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// iid or shard.
    #[arg(long, default_value = "iid")]
    pub partition: Partition,
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub samples_per_client: usize,
    /// Spread of the class means; larger is easier.
    #[arg(long, default_value_t = 0.5)]
    pub separation: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub setup: TrainSetup,
    /// Aggregation intervals of the tiers below the top; defaults to all ones.
    #[arg(long)]
    pub intervals: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub rounds: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub setup: TrainSetup,
    #[arg(long)]
    pub intervals: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub rounds: u64,
    #[arg(long, default_value_t = 10)]
    pub snapshot_every: u64,
    /// Fragment file to write; defaults to gradient_stats.toml in the output directory.
    #[serde(skip)]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Builtin name or profile file.
    pub profile: String,
    /// Gradient statistics fragment written by `estimate-params`.
    #[arg(long)]
    pub merge: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TopologyArgs {
    /// Topology file to normalize; defaults to the seeded evaluation scenario.
    pub topology: Option<PathBuf>,
    #[arg(long, default_value_t = 0, conflicts_with = "topology")]
    pub seed: u64,
}
