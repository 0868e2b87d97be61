//! Scenario runner for the geodesic lens laboratory: every diagnostic is a
//! subcommand taking a scenario file, with reproducible seeds and
//! machine-readable outputs.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 model rejected, 4 numeric
//! failure.

mod output;
mod run;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CommandKind {
    LensTable,
    Distance,
    VolumeCheck,
    IntersectionCheck,
    FanCheck,
    DouadyCheck,
    TrappedProbe,
    ConjugateScan,
    ConeCheck,
    ThetaCurve,
    Jensen,
    PsiMap,
    Certificate,
    CrokeChain,
}

impl CommandKind {
    fn as_str(&self) -> &'static str {
        match self {
            CommandKind::LensTable => "lens-table",
            CommandKind::Distance => "distance",
            CommandKind::VolumeCheck => "volume-check",
            CommandKind::IntersectionCheck => "intersection-check",
            CommandKind::FanCheck => "fan-check",
            CommandKind::DouadyCheck => "douady-check",
            CommandKind::TrappedProbe => "trapped-probe",
            CommandKind::ConjugateScan => "conjugate-scan",
            CommandKind::ConeCheck => "cone-check",
            CommandKind::ThetaCurve => "theta-curve",
            CommandKind::Jensen => "jensen",
            CommandKind::PsiMap => "psi-map",
            CommandKind::Certificate => "certificate",
            CommandKind::CrokeChain => "croke-chain",
        }
    }
}

/// Geodesic-flow diagnostics on surfaces with boundary.
#[derive(Parser, Debug)]
#[command(name = "lenslab", version, about)]
struct Cli {
    /// Diagnostic to run.
    #[arg(value_enum)]
    command: CommandKind,
    /// Scenario file (line-oriented key = value sections).
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap the global worker-thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the trapping horizon.
    #[arg(long)]
    t_max: Option<f64>,
    /// Override the quadrature grid resolution (both axes).
    #[arg(long)]
    grid: Option<usize>,
    /// Accept models whose boundary fails the strict-convexity gate.
    #[arg(long)]
    allow_nonconvex: bool,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = run::Overrides {
        seed: cli.seed,
        threads: cli.threads,
        t_max: cli.t_max,
        grid: cli.grid,
        allow_nonconvex: cli.allow_nonconvex,
        out_dir: cli.out_dir,
    };
    match run::run(cli.command.as_str(), &cli.scenario, &overrides) {
        Ok(()) => ExitCode::from(0),
        Err(e) => {
            eprintln!("lenslab: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
