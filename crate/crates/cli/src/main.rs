mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use weakcalc::rng::with_workers;
use weakcalc::Error;

use commands::{Outcome, Sink};
use config::ConfigFile;

const VERSION: &str = env!("WEAKCALC_VERSION");

#[derive(Parser)]
#[command(name = "weakcalc", version = VERSION, about = "Weak functional Itô calculus on Brownian hitting-time skeletons")]
struct Cli {
    /// TOML experiment config; missing tables and keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 uses every logical core. Results do not depend on it.
    #[arg(long, global = true, env = "WEAKCALC_WORKERS", default_value_t = 0)]
    workers: usize,
    /// Overrides every seed in the selected table.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample the exit law and test its moments and CDF.
    ExitLaw,
    /// Generate one skeleton and write its events.
    SampleSkeleton,
    /// Weak derivative at every event, with an L2 error against a reference.
    EstimateDerivative,
    /// Generator field and the compensator/martingale split.
    EstimateGenerator,
    /// Error of the operators as the mesh shrinks.
    ConvergenceReport,
    /// Optimal stopping value and policy.
    SolveStopping,
    /// Backward equation by regression.
    SolveBsde,
    /// Energy comparison of the backward solution against perturbations.
    EnergyCheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::ExitLaw => "exit-law",
            Command::SampleSkeleton => "sample-skeleton",
            Command::EstimateDerivative => "estimate-derivative",
            Command::EstimateGenerator => "estimate-generator",
            Command::ConvergenceReport => "convergence-report",
            Command::SolveStopping => "solve-stopping",
            Command::SolveBsde => "solve-bsde",
            Command::EnergyCheck => "energy-check",
        }
    }
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ORACLE: u8 = 3;

fn load(path: Option<&Path>) -> Result<ConfigFile, String> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            config::parse(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

fn apply_seed(c: &mut ConfigFile, command: Command, seed: u64) {
    match command {
        Command::ExitLaw => c.exit_law.seed = seed,
        Command::SampleSkeleton => c.sample_skeleton.seed = seed,
        Command::EstimateDerivative => c.estimate_derivative.skeleton.seed = seed,
        Command::EstimateGenerator => c.estimate_generator.skeleton.seed = seed,
        Command::ConvergenceReport => c.convergence_report.study.seed = seed,
        Command::SolveStopping => c.solve_stopping.solver.seed = seed,
        Command::SolveBsde => c.solve_bsde.scheme.seed = seed,
        Command::EnergyCheck => {
            c.energy_check.bsde.scheme.seed = seed;
            c.energy_check.energy.seed = seed;
        }
    }
}

/// The selected table, echoed into the manifest, and its seed.
fn section(c: &ConfigFile, command: Command) -> (serde_json::Value, u64) {
    let echo = |v: &dyn erased::Echo| v.echo();
    match command {
        Command::ExitLaw => (echo(&c.exit_law), c.exit_law.seed),
        Command::SampleSkeleton => (echo(&c.sample_skeleton), c.sample_skeleton.seed),
        Command::EstimateDerivative => (echo(&c.estimate_derivative), c.estimate_derivative.skeleton.seed),
        Command::EstimateGenerator => (echo(&c.estimate_generator), c.estimate_generator.skeleton.seed),
        Command::ConvergenceReport => (echo(&c.convergence_report), c.convergence_report.study.seed),
        Command::SolveStopping => (echo(&c.solve_stopping), c.solve_stopping.solver.seed),
        Command::SolveBsde => (echo(&c.solve_bsde), c.solve_bsde.scheme.seed),
        Command::EnergyCheck => (echo(&c.energy_check), c.energy_check.bsde.scheme.seed),
    }
}

mod erased {
    pub trait Echo {
        fn echo(&self) -> serde_json::Value;
    }

    impl<T: serde::Serialize> Echo for T {
        fn echo(&self) -> serde_json::Value {
            serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
        }
    }
}

fn run(c: &ConfigFile, command: Command, sink: &mut Sink) -> weakcalc::Result<()> {
    match command {
        Command::ExitLaw => commands::exit_law(&c.exit_law, sink),
        Command::SampleSkeleton => commands::sample_skeleton(&c.sample_skeleton, sink),
        Command::EstimateDerivative => commands::estimate_derivative(&c.estimate_derivative, sink),
        Command::EstimateGenerator => commands::estimate_generator(&c.estimate_generator, sink),
        Command::ConvergenceReport => commands::convergence_report(&c.convergence_report, sink),
        Command::SolveStopping => commands::solve_stopping(&c.solve_stopping, sink),
        Command::SolveBsde => commands::solve_bsde_command(&c.solve_bsde, sink),
        Command::EnergyCheck => commands::energy_check_command(&c.energy_check, sink),
    }
}

fn write_manifest(out: &Path, manifest: &serde_json::Value) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
    std::fs::write(out.join("manifest.json"), format!("{text}\n"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return ExitCode::from(EXIT_FAILURE);
    }
    let name = cli.command.name();
    let manifest = |seed: Option<u64>, echo: serde_json::Value, status: &str, message: &str, artifacts: &[String]| {
        json!({
            "schema": 1,
            "version": VERSION,
            "subcommand": name,
            "seed": seed,
            "config": echo,
            "status": status,
            "message": message,
            "artifacts": artifacts,
        })
    };

    let mut config = match load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(message) => {
            eprintln!("config error: {message}");
            let _ = write_manifest(&cli.out, &manifest(None, serde_json::Value::Null, "config_error", &message, &[]));
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = cli.seed {
        apply_seed(&mut config, cli.command, seed);
    }
    let (echo, seed) = section(&config, cli.command);

    let mut sink = Sink::new(&cli.out);
    let result = with_workers(cli.workers, || run(&config, cli.command, &mut sink));
    let Outcome { artifacts, gaps } = sink.finish();
    let (status, message, code) = match result {
        Err(Error::Config(m)) => ("config_error", m, EXIT_CONFIG),
        Err(e) => ("error", e.to_string(), EXIT_FAILURE),
        Ok(()) if !gaps.is_empty() => ("oracle_gap", gaps.join("; "), EXIT_ORACLE),
        Ok(()) => ("ok", String::new(), 0),
    };
    if let Err(e) = write_manifest(&cli.out, &manifest(Some(seed), echo, status, &message, &artifacts)) {
        eprintln!("error: cannot write manifest: {e}");
        return ExitCode::from(EXIT_FAILURE);
    }
    if code != 0 {
        eprintln!("{status}: {message}");
    }
    ExitCode::from(code)
}
