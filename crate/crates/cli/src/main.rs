use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "decoylab", version, about = "Decoy search-query generation and evaluation")]
struct Cli {
    /// Run configuration (TOML); built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replay against an already running engine instead of spawning one.
    #[arg(long, global = true)]
    engine_addr: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build keyword pools from RSS/Atom feeds.
    CorpusBuild {
        /// Feed file for a topic, repeatable.
        #[arg(long = "feed", value_name = "TOPIC=PATH")]
        feeds: Vec<String>,
        /// Also write the synthetic feed world and its pools.
        #[arg(long)]
        synthetic: bool,
    },
    /// Simulate a user with decoys and replay everything through the engine.
    Simulate,
    /// Run an attack on an adversary-visible query log.
    Attack {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=3))]
        attack: u8,
        /// Earlier log of the same user, used to build the prior profile.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Directory of keyword pool files for topic classification.
        #[arg(long)]
        pools: Option<PathBuf>,
    },
    /// Score a verdict against the ground-truth sidecar.
    Evaluate {
        #[arg(long)]
        verdict: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        test_id: Option<String>,
    },
    /// Summarize metrics files.
    Report {
        #[arg(long = "metrics")]
        metrics: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = commands::Context::load(cli.config.as_deref(), cli.seed, cli.out, cli.engine_addr)?;
    match cli.command {
        Command::CorpusBuild { feeds, synthetic } => commands::corpus_build(&ctx, &feeds, synthetic),
        Command::Simulate => commands::simulate(&ctx),
        Command::Attack {
            log,
            attack,
            history,
            threshold,
            pools,
        } => commands::attack(&ctx, &log, attack, history.as_deref(), threshold, pools.as_deref()),
        Command::Evaluate {
            verdict,
            ground_truth,
            test_id,
        } => commands::evaluate(&ctx, &verdict, &ground_truth, test_id),
        Command::Report { metrics } => commands::report(&ctx, &metrics),
    }
}
