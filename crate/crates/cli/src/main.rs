use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orepanel::pipeline::{self, Stage, StageFailure};
use orepanel::synth::SynthConfig;

/// Spatial panel pipeline for mine openings and closings.
#[derive(Parser)]
#[command(name = "orepanel", version, about)]
struct Cli {
    /// more log output (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration
    #[arg(short, long)]
    config: PathBuf,
    /// output directory, overriding `output_dir` in the configuration
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// directory receiving the data set and its config.json
    #[arg(short, long)]
    out: PathBuf,
    /// JSON generator configuration; flags below override it
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    countries: Option<usize>,
    #[arg(long)]
    deposits_per_country: Option<usize>,
    /// number of tiles that also get segmentation mask files
    #[arg(long)]
    mask_tiles: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Tile grid around the deposits
    Grid(RunArgs),
    /// Deposit statuses and tile assignment
    Classify(RunArgs),
    /// Outcome table, with land cover from masks where present
    Ingest(RunArgs),
    /// Outlier screening of the continuous outcomes
    Screen(RunArgs),
    /// Tile-period panel
    Panel(RunArgs),
    /// Stacked event data sets
    Stack(RunArgs),
    /// Regression specifications
    Estimate(RunArgs),
    /// Distance profiles and balance tests
    Describe(RunArgs),
    /// Every stage from grid to describe
    All(RunArgs),
    /// Synthetic data set with known effects
    Synth(SynthArgs),
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("OREPANEL_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("OREPANEL_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run_stages(args: &RunArgs, stages: &[Stage]) -> ExitCode {
    let cfg = match pipeline::load_config(&args.config, args.out.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pipeline::run(&cfg, stages) {
        Ok(m) => {
            for st in stages {
                if let Some(rec) = m.stage(*st) {
                    let rows: usize = rec.artifacts.iter().map(|a| a.rows).sum();
                    println!("{st}: {} artifacts, {rows} rows", rec.artifacts.len());
                }
            }
            println!("manifest: {}", cfg.output_dir.join(pipeline::MANIFEST_FILE).display());
            ExitCode::SUCCESS
        }
        Err(f) => report(&f),
    }
}

fn report(f: &StageFailure) -> ExitCode {
    eprintln!("error: {f}");
    ExitCode::from(f.exit_code() as u8)
}

fn load_synth(path: &Path) -> Result<SynthConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
}

fn run_synth(args: &SynthArgs) -> ExitCode {
    let mut cfg = match &args.config {
        Some(p) => match load_synth(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.countries {
        cfg.n_countries = n;
    }
    if let Some(n) = args.deposits_per_country {
        cfg.deposits_per_country = n;
    }
    if let Some(n) = args.mask_tiles {
        cfg.mask_tiles = n;
    }
    match pipeline::run_synth(&cfg, &args.out) {
        Ok(_) => {
            println!("synthetic data set: {}", args.out.display());
            println!("run it with: orepanel all --config {}", args.out.join(pipeline::CONFIG_FILE).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
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
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match &cli.command {
        Command::Grid(a) => run_stages(a, &[Stage::Grid]),
        Command::Classify(a) => run_stages(a, &[Stage::Classify]),
        Command::Ingest(a) => run_stages(a, &[Stage::Ingest]),
        Command::Screen(a) => run_stages(a, &[Stage::Screen]),
        Command::Panel(a) => run_stages(a, &[Stage::Panel]),
        Command::Stack(a) => run_stages(a, &[Stage::Stack]),
        Command::Estimate(a) => run_stages(a, &[Stage::Estimate]),
        Command::Describe(a) => run_stages(a, &[Stage::Describe]),
        Command::All(a) => run_stages(a, &Stage::ALL),
        Command::Synth(a) => run_synth(a),
    }
}
