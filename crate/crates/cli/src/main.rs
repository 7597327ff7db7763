use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orthoglide::config::ExperimentConfig;
use orthoglide::experiment::{characterize, run_grid, to_um, verify, Execution, Suite, VerifyOptions};
use orthoglide::simulator::{compute_metrics, run_simulation};
use orthoglide::Error;
use serde_json::json;

/// Simulation and control experiments on the Orthoglide parallel machine.
#[derive(Parser)]
#[command(name = "orthoglide", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file (defaults are used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for batch runs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one closed-loop simulation and writes its log as CSV.
    Simulate(Common),
    /// Runs the controller comparison grid and writes one CSV row per cell.
    Grid(Common),
    /// Characterizes the pose sensor against acceleration.
    SensorCharacterize(Common),
    /// Runs the self-check suites and prints a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Restricts the run to the named suites.
        #[arg(long, value_parser = parse_suite)]
        suite: Vec<Suite>,
        /// Adds this offset to d4 in the forward-kinematic model (fault injection).
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt_d4: f64,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Prints every configuration key with its default value.
    Dump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_suite(name: &str) -> Result<Suite, String> {
    Suite::parse(name).ok_or_else(|| {
        let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
        format!("unknown suite '{name}' (expected one of {})", names.join(", "))
    })
}

enum Failure {
    Model(Error),
    Io(io::Error),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Model(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    match &common.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn execution(jobs: Option<usize>) -> Execution {
    Execution::Parallel { jobs }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = load(&common)?;
            let sim = match common.seed {
                Some(s) => cfg.sim.with_seed(s),
                None => cfg.sim,
            };
            sim.validate()?;
            let path = cfg.path.build(&sim.plant.geom)?;
            let log = run_simulation(&sim, &path)?;
            let metrics = compute_metrics(&log, 0.0)?;
            let mut w = output(&common.out)?;
            log.write_csv(&mut w)?;
            w.flush()?;
            let summary = json!({
                "controller": sim.controller.kind.name(),
                "rows": log.records.len(),
                "static_um": to_um(metrics.static_accuracy),
                "dynamic_um": to_um(metrics.dynamic_accuracy),
                "max_um": to_um(metrics.max_error),
            });
            if common.out.is_some() {
                println!("{summary}");
            } else {
                eprintln!("{summary}");
            }
        }
        Command::Grid(common) => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.grid.base_seed = s;
            }
            let result = run_grid(&cfg.grid, &cfg.sim, execution(common.jobs))?;
            let mut w = output(&common.out)?;
            result.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::SensorCharacterize(common) => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.characterize.vision.seed = s;
            }
            let result = characterize(&cfg.characterize, &cfg.sim.plant.geom)?;
            let mut w = output(&common.out)?;
            result.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::Verify {
            common,
            suite,
            corrupt_d4,
        } => {
            let cfg = load(&common)?;
            cfg.sim.plant.validate()?;
            let opts = VerifyOptions {
                samples: cfg.verify.samples,
                seed: common.seed.unwrap_or(cfg.verify.seed),
                corrupt_d4,
            };
            let checks = verify(&suite, &cfg.sim.plant, &opts);
            let mut w = output(&common.out)?;
            writeln!(
                w,
                "{:<11} {:<32} {:>12} {:>10}  result",
                "suite", "check", "worst", "tolerance"
            )?;
            for c in &checks {
                writeln!(
                    w,
                    "{:<11} {:<32} {:>12.3e} {:>10.1e}  {}",
                    c.suite.name(),
                    c.name,
                    c.worst,
                    c.tolerance,
                    if c.passed() { "pass" } else { "FAIL" }
                )?;
            }
            w.flush()?;
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                return Err(Failure::Checks(failed));
            }
        }
        Command::Config {
            action: ConfigAction::Dump { out },
        } => {
            let mut w = output(&out)?;
            w.write_all(ExperimentConfig::default().to_toml().as_bytes())?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (code, kind, message) = match run(cli) {
        Ok(()) => return ExitCode::SUCCESS,
        Err(Failure::Model(e)) => {
            let code = match e {
                Error::Config(_) | Error::WorkspaceViolation { .. } => 2,
                _ => 1,
            };
            (code, e.kind().to_string(), e.to_string())
        }
        Err(Failure::Io(e)) => (1, "IoError".to_string(), e.to_string()),
        Err(Failure::Checks(n)) => (1, "VerificationFailed".to_string(), format!("{n} checks failed")),
    };
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}
