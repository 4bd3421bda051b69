//! Command-line driver for the field localization toolkit.
//!
//! Five subcommands cover the full workflow: `simulate` writes a dataset
//! (sensor log, ground truth, elevation map), `optimize` and `online` turn
//! a log into a trajectory estimate, `ablate` scores cue subsets against
//! truth, and `eval` scores a single estimate. Results go to files named
//! on the command line; everything printed to the terminal goes to the
//! error stream. Given identical inputs every command writes byte-identical
//! outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 missing or malformed data,
//! 3 optimizer failure.

mod config;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::Config;
use rowloc::dem::DemGrid;
use rowloc::eval::{
    ablation_table, compute_stats, parse_cues, read_estimate, stats_csv, to_trajectory,
    write_estimate, AblationError, AblationRow, Trajectory,
};
use rowloc::factors::FactorKind;
use rowloc::pipeline::{run_batch, run_online, PipelineError, RunResult, SensorLog};
use rowloc::sim::{export_dem, generate_truth, read_truth, simulate_sensors, write_truth};

/// Pose-graph localization for ground robots in row-crop fields.
#[derive(Parser)]
#[command(name = "rowloc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset: sensor log, ground truth, elevation map
    Simulate {
        /// Field, noise and pipeline settings, one `key = value` per line
        /// [default: built-in defaults]
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Directory receiving log.txt, truth.txt and dem.txt
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Noise seed, overriding the config [default: 7]
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Estimate a trajectory from a sensor log in one batch pass
    Optimize {
        /// Sensor log to optimize
        #[arg(long, value_name = "FILE")]
        log: PathBuf,
        /// Elevation map enabling altitude-prior factors [default: none]
        #[arg(long, value_name = "FILE")]
        dem: Option<PathBuf>,
        /// Settings, one `key = value` per line [default: built-in defaults]
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Output trajectory estimate
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Estimate a trajectory with the incremental sliding-window runner
    Online {
        /// Sensor log to optimize
        #[arg(long, value_name = "FILE")]
        log: PathBuf,
        /// Elevation map enabling altitude-prior factors [default: none]
        #[arg(long, value_name = "FILE")]
        dem: Option<PathBuf>,
        /// Settings, one `key = value` per line [default: built-in defaults]
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Output trajectory estimate
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Output CSV of per-node solver reports [default: not written]
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Score cue subsets against ground truth and write a CSV table
    Ablate {
        /// Sensor log to optimize
        #[arg(long, value_name = "FILE")]
        log: PathBuf,
        /// Elevation map enabling altitude-prior factors [default: none]
        #[arg(long, value_name = "FILE")]
        dem: Option<PathBuf>,
        /// Ground-truth trajectory
        #[arg(long, value_name = "FILE")]
        truth: PathBuf,
        /// Cue masks: `;`-separated sets of `+`-joined cue names, with
        /// `ALL` naming every cue, e.g. `GPS;GPS+WO;ALL`
        #[arg(long, value_name = "MASKS")]
        masks: String,
        /// Also run each mask online and seed its batch pass from the result
        #[arg(long)]
        online: bool,
        /// Settings, one `key = value` per line [default: built-in defaults]
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Output CSV, one row per run in mask order
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score a trajectory estimate against ground truth
    Eval {
        /// Trajectory estimate to score
        #[arg(long, value_name = "FILE")]
        estimate: PathBuf,
        /// Ground-truth trajectory
        #[arg(long, value_name = "FILE")]
        truth: PathBuf,
        /// Output CSV with one statistics row
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

/// Failure classes, each mapped to a fixed process exit code.
#[derive(Debug, Error)]
enum CliError {
    /// Bad flag values the argument parser cannot catch, such as an
    /// unknown cue name in a mask.
    #[error("{0}")]
    Usage(String),
    /// Missing input files, malformed file contents, invalid settings.
    #[error("{0}")]
    Data(String),
    /// The optimizer failed to produce a solution.
    #[error("{0}")]
    Solver(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Solver { .. } => CliError::Solver(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn ablation_error(e: AblationError) -> CliError {
    match e {
        AblationError::Pipeline(p) => pipeline_error(p),
        AblationError::Eval(v) => CliError::Data(v.to_string()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, out, seed } => simulate(config.as_deref(), &out, seed),
        Command::Optimize {
            log,
            dem,
            config,
            out,
        } => optimize(&log, dem.as_deref(), config.as_deref(), &out),
        Command::Online {
            log,
            dem,
            config,
            out,
            report,
        } => online(
            &log,
            dem.as_deref(),
            config.as_deref(),
            &out,
            report.as_deref(),
        ),
        Command::Ablate {
            log,
            dem,
            truth,
            masks,
            online,
            config,
            out,
        } => ablate(
            &log,
            dem.as_deref(),
            &truth,
            &masks,
            online,
            config.as_deref(),
            &out,
        ),
        Command::Eval {
            estimate,
            truth,
            out,
        } => eval(&estimate, &truth, &out),
    }
}

fn simulate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.field.seed = seed;
    }
    fs::create_dir_all(out).map_err(|e| write_error(out, &e))?;
    let truth = generate_truth(&cfg.field);
    let log = simulate_sensors(&truth, &cfg.noise, cfg.field.seed);
    let dem = export_dem(&cfg.field, cfg.dem_spacing, cfg.dem_margin)
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_truth(&truth, &out.join("truth.txt")).map_err(pipeline_error)?;
    log.write_file(&out.join("log.txt")).map_err(pipeline_error)?;
    let dem_path = out.join("dem.txt");
    fs::write(&dem_path, dem.to_text()).map_err(|e| write_error(&dem_path, &e))?;
    Ok(())
}

fn optimize(
    log: &Path,
    dem: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let log = read_log(log)?;
    let dem = dem.map(read_dem).transpose()?;
    let result = run_batch(&log, dem.as_ref(), &cfg.pipeline, None).map_err(pipeline_error)?;
    write_estimate(&result.trajectory(), out).map_err(pipeline_error)
}

fn online(
    log: &Path,
    dem: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let log = read_log(log)?;
    let dem = dem.map(read_dem).transpose()?;
    let result = run_online(&log, dem.as_ref(), &cfg.pipeline).map_err(pipeline_error)?;
    write_estimate(&result.trajectory(), out).map_err(pipeline_error)?;
    if let Some(report) = report {
        fs::write(report, report_csv(&result)).map_err(|e| write_error(report, &e))?;
    }
    Ok(())
}

fn ablate(
    log: &Path,
    dem: Option<&Path>,
    truth: &Path,
    masks: &str,
    online: bool,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let masks = parse_masks(masks)?;
    let cfg = load_config(config)?;
    let log = read_log(log)?;
    let dem = dem.map(read_dem).transpose()?;
    let truth = read_truth_trajectory(truth)?;
    let rows = ablation_table(&log, dem.as_ref(), &truth, &masks, &cfg.pipeline, online)
        .map_err(ablation_error)?;
    fs::write(out, stats_csv(&rows)).map_err(|e| write_error(out, &e))
}

fn eval(estimate: &Path, truth: &Path, out: &Path) -> Result<(), CliError> {
    require_file(estimate)?;
    let estimate = read_estimate(estimate).map_err(pipeline_error)?;
    let truth = read_truth_trajectory(truth)?;
    let stats = compute_stats(&estimate, &truth).map_err(|e| CliError::Data(e.to_string()))?;
    let row = AblationRow {
        cues: "-".to_string(),
        mode: "eval",
        stats,
    };
    fs::write(out, stats_csv(&[row])).map_err(|e| write_error(out, &e))
}

/// Splits a `;`-separated mask list into cue sets, in input order.
fn parse_masks(masks: &str) -> Result<Vec<BTreeSet<FactorKind>>, CliError> {
    masks
        .split(';')
        .map(|mask| parse_cues(mask).map_err(CliError::Usage))
        .collect()
}

/// Per-node solver reports as CSV. Wall time is omitted so reruns on the
/// same inputs stay byte-identical.
fn report_csv(result: &RunResult) -> String {
    let mut out = String::from("node,iterations,initial_chi2,final_chi2,converged\n");
    for (id, r) in result.reports.iter().enumerate() {
        writeln!(
            out,
            "{id},{},{:.6},{:.6},{}",
            r.iterations, r.initial_chi2, r.final_chi2, r.converged
        )
        .unwrap();
    }
    out
}

/// Reads a config file, or returns defaults when no path was given.
/// Unknown-key warnings go to the error stream.
fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    require_file(path)?;
    let text = read_text(path)?;
    let (cfg, warnings) = config::parse_config(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for w in warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(cfg)
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "input file not found: {}",
            path.display()
        )))
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_log(path: &Path) -> Result<SensorLog, CliError> {
    require_file(path)?;
    SensorLog::read_file(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_dem(path: &Path) -> Result<DemGrid, CliError> {
    require_file(path)?;
    let text = read_text(path)?;
    DemGrid::from_text(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_truth_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    require_file(path)?;
    let truth =
        read_truth(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(to_trajectory(&truth))
}

fn write_error(path: &Path, e: &std::io::Error) -> CliError {
    CliError::Data(format!("cannot write {}: {e}", path.display()))
}
