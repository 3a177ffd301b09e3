use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use featgen_core::evaluators::ModelKind;
use featgen_core::pipeline::{self, Ablation, RunConfig};
use featgen_core::synth::{self, SynthKind};
use featgen_core::{Split, TaskKind};

/// Learned feature generation for tabular data.
#[derive(Parser)]
#[command(name = "featgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and fine-tune a policy on a CSV and write a run directory.
    Run(RunArgs),
    /// Apply a saved program to a CSV.
    Transform(TransformArgs),
    /// Write a synthetic dataset with a known feature interaction.
    Synth(SynthArgs),
    /// Train a downstream model on a CSV and print its metrics.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// random_forest or mlp.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Reward metric key, e.g. macro_f1.
    #[arg(long)]
    metric: Option<String>,
    /// full, no-pretrain or no-ppo.
    #[arg(long)]
    ablate: Option<Ablation>,
    /// Maximum number of generated columns.
    #[arg(long)]
    cap: Option<usize>,
    /// Any config key, e.g. `--set ppo.iterations=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TransformArgs {
    /// Program file; a `.json` sidecar next to it supplies training statistics.
    #[arg(long)]
    program: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target column to leave out of the features when no sidecar exists.
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// product, xor or linear.
    #[arg(long)]
    kind: SynthKind,
    #[arg(long, default_value_t = 1000)]
    rows: usize,
    #[arg(long, default_value_t = 5)]
    features: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    target: String,
    #[arg(long, default_value = "classification")]
    task: TaskKind,
    #[arg(long, default_value = "random_forest")]
    model: ModelKind,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config.apply_text(&text)?;
    }
    if let Some(v) = args.data {
        config.data = v;
    }
    if let Some(v) = args.target {
        config.target = v;
    }
    if let Some(v) = args.task {
        config.task = v;
    }
    config.seed = Some(args.seed);
    if let Some(v) = args.out {
        config.out_dir = Some(v);
    }
    if let Some(v) = args.model {
        config.model = v;
    }
    if let Some(v) = &args.metric {
        config.set("metric", v)?;
    }
    if let Some(v) = args.ablate {
        config.ablation = v;
    }
    if let Some(v) = args.cap {
        config.cap = Some(v);
    }
    for item in &args.overrides {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {item:?}"))?;
        config.set(k.trim(), v.trim())?;
    }
    let report = pipeline::run(&config)?;
    print!("{}", report.to_text());
    println!("output: {}", report.out_dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Transform(args) => {
            let summary = pipeline::transform_file(&args.program, &args.data, &args.out, args.target.as_deref())?;
            log::info!(
                "wrote {} rows with {} generated columns ({} skipped) to {}",
                summary.rows,
                summary.generated.len(),
                summary.skipped,
                args.out.display()
            );
            Ok(())
        }
        Command::Synth(args) => {
            let data = synth::generate(args.kind, args.rows, args.features, args.seed)?;
            synth::write(&data, &args.out)?;
            log::info!("wrote {} ({} rows)", args.out.display(), args.rows);
            Ok(())
        }
        Command::Evaluate(args) => {
            let report = pipeline::evaluate_csv(
                &args.data,
                &args.target,
                args.task,
                args.model,
                args.split,
                featgen_core::dataset::DEFAULT_FRACTIONS,
                args.seed,
            )?;
            print!("{}", report.to_text());
            Ok(())
        }
    }
}
