use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use oppfl::learner::Strategy;
use oppfl::linktime::duration_matrix;
use oppfl::scenario::Scenario;
use oppfl::sim::{run, RunMetrics, RunOptions};
use serde_json::json;
use sha2::{Digest, Sha256};

mod config;
mod inspect;
mod tune;

use config::{check_data_files, data_root, load_scenario, Overrides};

/// Exit status 2 for configuration problems, 1 for failures during a run.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "oppfl",
    version,
    about = "Opportunistic federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.csv, sessions.jsonl and manifest.json.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the required encounter durations for the reference profiles.
    BenchTime {
        #[arg(long, default_value_t = 6)]
        rho: u32,
        #[arg(long)]
        json: bool,
    },
    /// Grid-search eta, lambda, kappa and phi; write the best as a fragment.
    Tune {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// JSON file with eta/lambda/kappa/phi lists.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value = "tune.json")]
        out: PathBuf,
    },
    /// Summarize a metrics CSV per strategy.
    Inspect { csv: PathBuf },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Override a config value, e.g. `--set hyper.eta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Tuning output whose hyperparameters replace the config's.
    #[arg(long)]
    fragment: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(short, long)]
    verbose: bool,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario, CliError> {
        let overrides = Overrides {
            sets: self.sets.clone(),
            fragment: self.fragment.clone(),
            seed: self.seed,
            strategy: self.strategy,
        };
        let scenario = load_scenario(&self.config, &overrides)?;
        check_data_files(&scenario, &data_root())?;
        Ok(scenario)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            workers: self.workers,
            data_root: data_root(),
        }
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, out } => cmd_run(&scenario, &out),
        Command::BenchTime { rho, json } => cmd_bench_time(rho, json),
        Command::Tune {
            scenario,
            grid,
            out,
        } => cmd_tune(&scenario, grid.as_deref(), &out),
        Command::Inspect { csv } => cmd_inspect(&csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn scenario_hash(scenario: &Scenario) -> String {
    let canonical = serde_json::to_vec(scenario).expect("scenario serializes");
    hex::encode(Sha256::digest(&canonical))
}

fn cmd_run(args: &ScenarioArgs, out: &Path) -> Result<(), CliError> {
    let scenario = args.load()?;
    if args.verbose {
        eprintln!(
            "running {} ({}) with seed {}",
            scenario.name, scenario.strategy, scenario.seed
        );
    }
    let started = Instant::now();
    let metrics = run(&scenario, &args.options()).map_err(runtime)?;
    let wall_clock = started.elapsed().as_secs_f64();
    write_outputs(&scenario, &metrics, args.workers, wall_clock, out).map_err(runtime)?;
    if args.verbose {
        eprintln!(
            "{} rows, {} sessions in {wall_clock:.1}s -> {}",
            metrics.rows.len(),
            metrics.sessions.len(),
            out.display()
        );
    }
    Ok(())
}

fn write_outputs(
    scenario: &Scenario,
    metrics: &RunMetrics,
    workers: usize,
    wall_clock_s: f64,
    out: &Path,
) -> oppfl::Result<()> {
    fs::create_dir_all(out)?;
    let mut csv = BufWriter::new(File::create(out.join("metrics.csv"))?);
    metrics.write_csv(&mut csv)?;
    csv.flush()?;
    let mut sessions = BufWriter::new(File::create(out.join("sessions.jsonl"))?);
    metrics.write_sessions_jsonl(&mut sessions)?;
    sessions.flush()?;
    let manifest = json!({
        "schema": 1,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "scenario_hash": scenario_hash(scenario),
        "seed": scenario.seed,
        "strategy": scenario.strategy,
        "kind": scenario.kind,
        "workers": workers,
        "wall_clock_s": wall_clock_s,
        "bootstrap_accuracy": metrics.bootstrap_accuracy,
        "rows": metrics.rows.len(),
        "sessions": metrics.sessions.len(),
        "total_bytes_sent": metrics.total_bytes(),
        "notes": metrics.notes,
        "config": scenario,
    });
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(())
}

fn cmd_bench_time(rho: u32, as_json: bool) -> Result<(), CliError> {
    let rows = duration_matrix(rho);
    if as_json {
        println!("{}", serde_json::to_string_pretty(&rows).map_err(runtime)?);
        return Ok(());
    }
    println!(
        "{:<20} {:>8} {:>8} {:>8} {:>9}",
        "profile", "t_train", "t_agg", "t_send", "t_enc"
    );
    for r in rows {
        println!(
            "{:<20} {:>8.3} {:>8.3} {:>8.3} {:>9.2}",
            r.name, r.t_train, r.t_agg, r.t_send, r.t_enc
        );
    }
    Ok(())
}

fn cmd_tune(args: &ScenarioArgs, grid_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let scenario = args.load()?;
    let grid = match grid_path {
        None => tune::Grid::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    let (points, best) = tune::tune(&scenario, &grid, &args.options())?;
    println!(
        "{:>8} {:>8} {:>8} {:>8} {:>8}",
        "eta", "lambda", "kappa", "phi", "score"
    );
    for (i, p) in points.iter().enumerate() {
        let mark = if i == best { " *" } else { "" };
        println!(
            "{:>8} {:>8} {:>8} {:>8} {:>8.4}{mark}",
            p.hyper.eta, p.hyper.lambda, p.hyper.kappa, p.hyper.phi, p.score
        );
    }
    let frag = tune::fragment(&points[best].hyper);
    fs::write(
        out,
        serde_json::to_string_pretty(&frag).map_err(runtime)? + "\n",
    )
    .map_err(runtime)?;
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let file =
        File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let summaries = inspect::summarize(file)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    print!("{}", inspect::render(&summaries));
    Ok(())
}
