use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmu2::harness::{self, ExperimentConfig, Grid};

#[derive(Parser)]
#[command(name = "fedmu2", version, about = "Private federated optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the empirical checks and print a report table.
    Verify {
        /// Run a single check by name.
        #[arg(long)]
        check: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a base config over the cartesian product of a grid file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn execute(cli: Cli) -> fedmu2::Result<bool> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.run.seed = seed;
            }
            if out.is_some() {
                cfg.out = out;
            }
            let outcome = harness::run_experiment(&cfg)?;
            if cfg.out.is_none() {
                let mut w = output(None)?;
                harness::write_metrics(&mut w, &outcome.output.metrics)?;
            }
            eprintln!("{}", outcome.summary.line());
            Ok(true)
        }
        Command::Sweep { config, grid, out } => {
            let base = ExperimentConfig::load(&config)?;
            let grid = Grid::load(&grid)?;
            let points = harness::sweep(&base, &grid)?;
            for p in &points {
                eprintln!("{}", p.outcome.summary.line());
            }
            let mut w = output(out.as_ref().or(base.out.as_ref()))?;
            harness::write_sweep(&mut w, &grid, &points)?;
            w.flush()?;
            Ok(true)
        }
        Command::Verify { check, out } => {
            let reports = match check {
                Some(name) => fedmu2::verify::run_check(&name)?,
                None => fedmu2::verify::run_all()?,
            };
            let mut w = output(out.as_ref())?;
            fedmu2::verify::write_reports(&mut w, &reports)?;
            w.flush()?;
            for r in &reports {
                eprintln!("{}", r.line());
            }
            Ok(reports.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
