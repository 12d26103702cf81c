//! Experiment runner CLI. Every command reads one JSON config document;
//! flags override its output directory, seed list, and worker count.
//! On failure, stderr carries a single machine-parseable line of the form
//! `error[<category>]: <message>` and the exit code is nonzero.

use clap::{Args, Parser, Subcommand};
use oikos::harness::{
    emit_all, emit_charts, load_results_json, run_experiment, ExperimentConfig, ExperimentKind,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "oikos",
    about = "Resource-constrained transformer experiments: train, sweep, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweep points (overrides the config)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and evaluate it under the configured constraint
    Train(RunArgs),
    /// Evaluate a zero-incentive baseline under each attention budget k
    SweepBudget(RunArgs),
    /// Train one model per incentive weight and trace the Pareto frontier
    SweepLambda(RunArgs),
    /// Compare attention-only / FFN-only / combined cost penalties
    Ablate(RunArgs),
    /// Re-emit charts from an existing results.json
    Report {
        /// Path to a results.json produced by a previous run
        #[arg(long)]
        results: PathBuf,
        /// Output directory for the regenerated charts
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &RunArgs, kind: ExperimentKind) -> oikos::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(&args.config)?;
    config.experiment = kind;
    if let Some(out) = &args.out {
        config.out_dir = out.display().to_string();
    }
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    config.validate()?;
    Ok(config)
}

fn execute(args: &RunArgs, kind: ExperimentKind) -> oikos::Result<()> {
    let config = load_config(args, kind)?;
    let output = run_experiment(&config)?;
    let out_dir = PathBuf::from(&config.out_dir);
    let files = emit_all(&config, &output, &out_dir)?;
    println!(
        "{} run(s) complete; {} file(s) in {}",
        output.results.len(),
        files.len(),
        out_dir.display()
    );
    for r in &output.results {
        let accuracy = r
            .accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "  {:<18} lambda {:<8} seed {:<3} constraint {:<22} loss {:.4} ppl {:.3} acc {} flops_eff {}",
            r.provenance, r.lambda, r.seed, r.constraint, r.task_loss, r.perplexity, accuracy,
            r.metrics.flops_effective
        );
    }
    Ok(())
}

fn report(results: &Path, out: &Path) -> oikos::Result<()> {
    let saved = load_results_json(results)?;
    let files = emit_charts(&saved.results, &saved.pareto, out)?;
    println!("{} chart(s) in {}", files.len(), out.display());
    Ok(())
}

fn run() -> oikos::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => execute(args, ExperimentKind::SingleRun),
        Command::SweepBudget(args) => execute(args, ExperimentKind::BudgetSweep),
        Command::SweepLambda(args) => execute(args, ExperimentKind::LambdaSweep),
        Command::Ablate(args) => execute(args, ExperimentKind::Ablation),
        Command::Report { results, out } => report(results, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
