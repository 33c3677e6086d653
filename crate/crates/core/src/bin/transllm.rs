use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use transllm::cli::{apply_overrides, error_json, run, Command, RunConfig};

#[derive(Parser)]
#[command(name = "transllm", version, about = "Spatiotemporal forecasting and dispatch with learned prompt routing")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic series or dispatch scenarios
    Synth(Common),
    /// Build spatial and semantic graphs
    BuildGraph(Common),
    /// Two-stage training, then evaluation
    Train(Common),
    /// Evaluate the run's checkpoint
    Eval(Common),
    /// Evaluate the checkpoint on an unseen domain
    ZeroShot(Common),
    /// Baseline and model dispatch metrics
    DispatchSim(Common),
    /// Prompt selection frequencies
    RouteStats(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let (command, common) = match args.command {
        Cmd::Synth(c) => (Command::Synth, c),
        Cmd::BuildGraph(c) => (Command::BuildGraph, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::ZeroShot(c) => (Command::ZeroShot, c),
        Cmd::DispatchSim(c) => (Command::DispatchSim, c),
        Cmd::RouteStats(c) => (Command::RouteStats, c),
    };
    let result = RunConfig::load(&common.config).and_then(|mut cfg| {
        apply_overrides(&mut cfg, common.seed, common.out);
        run(command, cfg)
    });
    match result {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("serialisable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(2)
        }
    }
}
