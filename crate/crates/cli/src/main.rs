use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cimlab::experiment::{self, ExperimentConfig, Summary, Task};
use cimlab::par;

/// Simulation lab for Bayesian, self-testing and fault-tolerant
/// compute-in-memory neural networks.
#[derive(Debug, Parser)]
#[command(name = "cimlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment pipeline.
    #[command(flatten)]
    Run(RunVerb),
    /// Merge the summaries under a directory into report.csv.
    Report {
        /// Directory holding run outputs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum RunVerb {
    /// Train the model and report accuracy.
    Train(RunArgs),
    /// Inject one stuck-at scenario and measure the accuracy drop.
    Inject(RunArgs),
    /// Monte-Carlo predictive accuracy, calibration and uncertainty.
    McEval(RunArgs),
    /// Entropy-based out-of-distribution detection.
    OodEval(RunArgs),
    /// Generate a one-shot test vector and measure fault coverage.
    Oneshot(RunArgs),
    /// Compare gradient-ranked and random test inputs.
    Rank(RunArgs),
    /// Train with an output fingerprint and measure concurrent detection.
    Fingerprint(RunArgs),
    /// Batch-norm recalibration or sensing-reference generation under variation.
    Recalibrate(RunArgs),
    /// Accuracy over a list of stuck-at rates.
    Sweep(RunArgs),
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment config (TOML). Without one the reference task is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

impl RunVerb {
    fn split(self) -> (Task, RunArgs) {
        match self {
            RunVerb::Train(a) => (Task::Train, a),
            RunVerb::Inject(a) => (Task::Inject, a),
            RunVerb::McEval(a) => (Task::McEval, a),
            RunVerb::OodEval(a) => (Task::OodEval, a),
            RunVerb::Oneshot(a) => (Task::OneShot, a),
            RunVerb::Rank(a) => (Task::Rank, a),
            RunVerb::Fingerprint(a) => (Task::Fingerprint, a),
            RunVerb::Recalibrate(a) => (Task::Recalibrate, a),
            RunVerb::Sweep(a) => (Task::Sweep, a),
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::from_toml("")?),
    }
}

fn threads() -> Result<Option<usize>> {
    match std::env::var("LAB_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("LAB_THREADS={v:?} is not a count"))?;
            if n == 0 {
                bail!("LAB_THREADS must be at least 1");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn print_summary(s: &Summary, out: &std::path::Path) {
    println!("{} -> {}", s.task, out.display());
    for a in &s.aggregate {
        let rate = a.rate.map_or_else(String::new, |r| format!(" rate={r}"));
        let metrics: Vec<String> = a.mean.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("  rows={}{rate} {}", a.rows, metrics.join(" "));
    }
}

fn run(task: Task, args: RunArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    match cfg.task {
        Some(t) if t != task => bail!("config describes task {:?}, not {:?}", t.name(), task.name()),
        _ => cfg.task = Some(task),
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let out = args
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(task.name()));
    let go = || experiment::run(&cfg, &out);
    let summary = match threads()? {
        Some(n) => par::with_threads(n, go),
        None => go(),
    }
    .with_context(|| format!("{} failed; partial results in {}", task.name(), out.display()))?;
    match args.format {
        Format::Text => print_summary(&summary, &out),
        Format::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(verb) => {
            let (task, args) = verb.split();
            run(task, args)
        }
        Command::Report { out, config } => {
            let dir = match (out, config) {
                (Some(d), _) => d,
                (None, Some(c)) => load_config(Some(&c))?
                    .output_dir
                    .context("config has no output_dir; pass --out")?,
                (None, None) => bail!("report needs --out or --config"),
            };
            let path = experiment::report(&dir)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}
