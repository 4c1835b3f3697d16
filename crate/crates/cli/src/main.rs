use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use coral_core::analysis::{self, AnalysisConfig, AnalysisError};
use coral_core::experiment::{run_experiment, ExperimentConfig, ExperimentError, Mode};
use coral_core::gridworld::manifest;

const BUILD: &str = concat!("coral ", env!("CARGO_PKG_VERSION"), " (", env!("CORAL_GIT_REV"), ")");

#[derive(Parser)]
#[command(name = "coral", version, about = "Train and evaluate information/control agent pairs on grid-world tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both agents on a task distribution.
    Pretrain(RunArgs),
    /// Train a fresh control agent next to a frozen information agent.
    Deploy(RunArgs),
    /// Evaluate frozen agents without updates.
    Zeroshot(RunArgs),
    /// Train the baselines (ppo, wm, random-msg).
    Baseline(RunArgs),
    /// Pretrain ablated variants and deploy each.
    Ablate(RunArgs),
    /// Time-to-threshold, confidence intervals, Welch tests and ICE curves over metrics files.
    Analyze(AnalyzeArgs),
    /// Print the task registry as JSON.
    Manifest,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated seeds or a `start..end` range.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated task names.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    ia_ckpt: Option<PathBuf>,
    #[arg(long)]
    ca_ckpt: Option<PathBuf>,
    /// Output root; beats CORAL_OUT and the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seeds concurrently.
    #[arg(long)]
    parallel_seeds: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Directory searched recursively for metrics.csv files.
    #[arg(long = "in")]
    input: PathBuf,
    /// Where results.csv and report.json go (defaults to the input directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Smoothing window in episodes.
    #[arg(long, default_value_t = analysis::DEFAULT_SMOOTHING_EPISODES)]
    window: usize,
    /// Method the others are compared against.
    #[arg(long, default_value = "deploy")]
    reference: String,
    #[arg(long, default_value_t = analysis::DEFAULT_GRID_POINTS)]
    grid_points: usize,
}

fn resolve(mode: Mode, args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = BTreeMap::new();
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(ExperimentError::Config(format!("--set expects KEY=VALUE, got `{kv}`")).into());
        };
        overrides.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.insert(k.to_owned(), v);
        }
    };
    flag("seeds", args.seeds.clone());
    flag("tasks", args.tasks.clone());
    flag("ia_ckpt", args.ia_ckpt.as_ref().map(|p| p.display().to_string()));
    flag("ca_ckpt", args.ca_ckpt.as_ref().map(|p| p.display().to_string()));
    flag("parallel_seeds", args.parallel_seeds.then(|| "true".to_owned()));
    let env_out = std::env::var("CORAL_OUT").ok().filter(|s| !s.is_empty());
    flag("out", args.out.as_ref().map(|p| p.display().to_string()).or(env_out));

    for k in overrides.keys() {
        if !coral_core::experiment::CONFIG_KEYS.contains(&k.as_str()) {
            return Err(ExperimentError::Config(format!("unknown key `{k}`")).into());
        }
    }
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, Some(mode), &overrides)?,
        None => ExperimentConfig::from_pairs(Some(mode), &overrides)?,
    };
    Ok(cfg)
}

fn run(mode: Mode, args: &RunArgs) -> anyhow::Result<()> {
    let cfg = resolve(mode, args)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    eprintln!("{} {}: {} seed(s) into {}", BUILD, mode.as_str(), cfg.seeds.len(), cfg.out.display());
    let summaries = run_experiment(&cfg, &cfg.out, BUILD, |s| {
        let ret = s.final_return.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into());
        eprintln!("finished {} ({} updates, {} steps, final return {ret})", s.run_id, s.updates, s.global_steps);
    })?;
    for s in summaries {
        println!("{}", cfg.out.join(&s.run_id).display());
    }
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> anyhow::Result<()> {
    if !args.input.is_dir() {
        bail!(ExperimentError::Config(format!("{} is not a directory", args.input.display())));
    }
    let curves = analysis::load_dir(&args.input)?;
    let cfg = AnalysisConfig { window: args.window, grid_points: args.grid_points, reference: args.reference.clone() };
    let report = analysis::analyze(&curves, &cfg)?;
    let out = args.out.clone().unwrap_or_else(|| args.input.clone());
    report.write(&out)?;
    for r in &report.rows {
        let ttt = r.ttt_mean.map(|t| format!("{:.3}M", t / 1e6)).unwrap_or_else(|| "-".into());
        let ret = r.mean_return.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        println!("{:<24} {:<20} TTT {ttt:>8}  SR {:>4.0}%  return {ret}", r.method, r.env, r.success_rate * 100.0);
    }
    println!("{}", out.join("report.json").display());
    Ok(())
}

fn print_manifest() -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(&manifest())?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(x) = e.downcast_ref::<ExperimentError>() {
        return x.exit_code() as u8;
    }
    match e.downcast_ref::<AnalysisError>() {
        Some(AnalysisError::EmptyInput | AnalysisError::InvalidWindow) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => run(Mode::Pretrain, a),
        Command::Deploy(a) => run(Mode::Deploy, a),
        Command::Zeroshot(a) => run(Mode::Zeroshot, a),
        Command::Baseline(a) => run(Mode::Baseline, a),
        Command::Ablate(a) => run(Mode::Ablate, a),
        Command::Analyze(a) => analyze(a),
        Command::Manifest => print_manifest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
