mod args;
mod commands;
mod output;

use std::process::ExitCode;

use args::{Cli, Command};
use clap::Parser;
use commands::{Globals, Status};

fn run(cli: Cli) -> anyhow::Result<Status> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let g = Globals { out_dir: cli.out_dir };
    match &cli.command {
        Command::Optimize(a) => commands::optimize(a, &g),
        Command::Latency(a) => commands::latency(a, &g),
        Command::Evaluate(a) => commands::evaluate_cmd(a, &g),
        Command::Sweep(a) => commands::sweep(a, &g),
        Command::Train(a) => commands::train_cmd(a, &g),
        Command::EstimateParams(a) => commands::estimate(a, &g),
        Command::Profile(a) => commands::profile(a),
        Command::Topology(a) => commands::topology(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::Infeasible) => ExitCode::from(3),
        Ok(Status::NotConverged) => {
            eprintln!("warning: solver stopped before reaching its tolerance");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
