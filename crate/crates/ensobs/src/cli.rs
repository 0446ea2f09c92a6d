//! Scenario runner: config ingestion, built-in experiment presets,
//! deterministic seeding, CSV and SVG artifact emission.

pub mod config;
pub mod csvio;
pub mod runner;
pub mod scenarios;
pub mod svg;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use config::{ScenarioConfig, SolverArg};

#[derive(Parser, Debug)]
#[command(
    name = "ensobs",
    version,
    about = "Population-level state estimation from anonymous output snapshots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Built-in scenario name (see `--help` of the subcommand for the list).
    scenario: Option<String>,
    /// Config file path; overrides the built-in list.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
    /// Override the histogram bin count.
    #[arg(long)]
    bins: Option<usize>,
    /// Override the transport solver.
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// Print the effective config as JSON and exit without running.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate truth and snapshot CSVs only.
    Simulate(RunArgs),
    /// Batch reconstruction of the initial state distribution.
    Estimate(RunArgs),
    /// Moving-horizon population observer.
    Observe(RunArgs),
    /// Moving-horizon multitarget tracker.
    TrackDiscrete(RunArgs),
    /// Score two ensemble CSVs against each other.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// First ensemble CSV.
    a: std::path::PathBuf,
    /// Second ensemble CSV.
    b: std::path::PathBuf,
    /// Projection directions for the sliced distance.
    #[arg(long, default_value_t = 200)]
    dirs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bins for the first-coordinate total variation.
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

fn load_config(args: &RunArgs) -> crate::Result<ScenarioConfig> {
    let mut cfg = match (&args.config, &args.scenario) {
        (Some(path), _) => ScenarioConfig::from_path(path)?,
        (None, Some(name)) => scenarios::by_name(name)?,
        (None, None) => {
            let names: Vec<String> = scenarios::built_in_scenarios()
                .iter()
                .map(|c| c.scenario.clone())
                .collect();
            return Err(Error::config(format!(
                "pass a scenario name ({}) or --config PATH",
                names.join(", ")
            )));
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(bins) = args.bins {
        cfg.bins = bins;
    }
    if let Some(solver) = args.solver {
        cfg.solver = solver.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_mode(args: &RunArgs, expected: &[config::Mode], simulate_only: bool) -> crate::Result<()> {
    let cfg = load_config(args)?;
    if args.dump_config {
        println!("{}", cfg.to_json()?);
        return Ok(());
    }
    if !simulate_only && !expected.contains(&cfg.mode) {
        return Err(Error::config(format!(
            "scenario '{}' has mode {:?}; use the matching subcommand",
            cfg.scenario, cfg.mode
        )));
    }
    if simulate_only {
        runner::run_simulate_only(&cfg)
    } else {
        runner::run_scenario(&cfg)
    }
}

fn dispatch(command: Command) -> crate::Result<()> {
    use config::Mode;
    match command {
        Command::Simulate(args) => run_mode(&args, &[], true),
        Command::Estimate(args) => {
            run_mode(&args, &[Mode::Estimate, Mode::EstimateDiscrete], false)
        }
        Command::Observe(args) => run_mode(&args, &[Mode::Observe], false),
        Command::TrackDiscrete(args) => run_mode(&args, &[Mode::TrackDiscrete], false),
        Command::Metrics(args) => {
            let ea = csvio::read_ensemble(&args.a)?;
            let eb = csvio::read_ensemble(&args.b)?;
            let sw = crate::metrics::sliced_w1(&ea, &eb, args.dirs, args.seed)?;
            println!("sliced_w1 = {sw} ({} dirs)", args.dirs);
            let xa: Vec<f64> = ea.particles().iter().map(|p| p[0]).collect();
            let xb: Vec<f64> = eb.particles().iter().map(|p| p[0]).collect();
            let tv = crate::metrics::tv_on_grid(&xa, &xb, args.bins)?;
            println!("tv_x1 = {tv} ({} bins)", args.bins);
            Ok(())
        }
    }
}

/// Binary entry point. Exit code 2 flags config problems, 1 everything else.
pub fn run() -> ExitCode {
    if let Ok(threads) = std::env::var("ENSOBS_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                // a failure here means a pool already exists, which is fine
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: ENSOBS_THREADS must be a positive integer, got '{threads}'");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
