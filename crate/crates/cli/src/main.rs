use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};

use cisrl_core::harness::{self, Context, Settings};
use cisrl_core::KvMap;

/// Set-guided reinforcement learning experiments on the CSTR benchmark.
#[derive(Parser, Debug)]
#[command(name = "cisrl", version)]
struct Cli {
    /// key=value experiment configuration
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    seed: u64,

    /// Use the robust set and bounded disturbances
    #[arg(long, global = true)]
    robust: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Synthesize the invariant sets, polytopes and backup tables
    Synth,
    /// Train agents with and without the safe set
    Train,
    /// Failure rates of trained agents on a shared initial-state list
    Test,
    /// Supervised online episodes
    Online,
    /// Compare economic performance of three reward designs
    Econ,
    /// Most economic steady state inside the safe set
    Ssopt,
    /// Recompute summary metrics from the logs and compare
    VerifyLogs,
}

fn run(cli: &Cli) -> anyhow::Result<serde_json::Value> {
    let kv = match &cli.config {
        Some(p) => KvMap::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => KvMap::default(),
    };
    let settings = Settings::from_kv(&kv)?;
    let ctx = Context::new(settings, &cli.out, cli.seed, cli.robust)?;
    let summary = match cli.command {
        Command::Synth => harness::cmd_synth(&ctx),
        Command::Train => harness::cmd_train(&ctx),
        Command::Test => harness::cmd_test(&ctx),
        Command::Online => harness::cmd_online(&ctx),
        Command::Econ => harness::cmd_econ(&ctx),
        Command::Ssopt => harness::cmd_ssopt(&ctx),
        Command::VerifyLogs => harness::cmd_verify_logs(&ctx),
    }?;
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
