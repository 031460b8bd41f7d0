use clap::{Parser, Subcommand};
use patchpure_cli::config::load_config;
use patchpure_cli::pipeline::{
    attack_cmd, bench_cmd, gen_advdata_cmd, report_cmd, theory_cmd, train_classifier_cmd,
    train_pool_cmd, Ctx,
};
use patchpure_cli::{Result, EXIT_CONFIG, EXIT_PARTIAL};
use std::path::PathBuf;

/// Randomized patch-wise purification testbed: train the models, attack
/// them under a query budget, check the convergence bounds, and report.
#[derive(Parser)]
#[command(name = "patchpure", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). Omitted: the built-in desk-scale default.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for the evaluation grid (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier and checkpoint it.
    TrainClassifier,
    /// Generate the white-box adversarial training pairs.
    GenAdvdata,
    /// Train the purifier pool on the adversarial pairs.
    TrainPool,
    /// Run the (defense x attack x budget) grid over the eval images.
    Attack,
    /// Run the convergence-bound and queries-to-success experiments.
    Theory,
    /// Measure patch-wise vs ensemble inference latency.
    Bench,
    /// Merge stage fragments and rewrite every report file.
    Report,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("patchpure: --jobs must be positive");
            return EXIT_CONFIG;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("patchpure: {e}");
            return EXIT_CONFIG;
        }
    }
    let loaded = match load_config(cli.config.as_deref(), cli.seed, cli.out.as_deref()) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("patchpure: {e}");
            return EXIT_CONFIG;
        }
    };
    let ctx = Ctx::new(loaded);
    let partial: Result<bool> = match cli.command {
        Command::TrainClassifier => train_classifier_cmd(&ctx).map(|()| false),
        Command::GenAdvdata => gen_advdata_cmd(&ctx).map(|()| false),
        Command::TrainPool => train_pool_cmd(&ctx).map(|()| false),
        Command::Attack => attack_cmd(&ctx),
        Command::Theory => theory_cmd(&ctx).map(|()| false),
        Command::Bench => bench_cmd(&ctx).map(|()| false),
        Command::Report => report_cmd(&ctx),
    };
    match partial {
        Ok(false) => 0,
        Ok(true) => EXIT_PARTIAL,
        Err(e) => {
            eprintln!("patchpure: {e}");
            EXIT_CONFIG
        }
    }
}
