//! Command-line front end: config parsing, dispatch and report emission.

// `!(x > 0.0)` also rejects NaN, which is the point
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::{CliError, ParaboloidArgs, RandomMeasure, RunOptions, DEFAULT_SEED};
use report::{write_artifacts, Outcome, RunReport, Status};

#[derive(Debug, Parser)]
#[command(name = "rblab", version, about = "Experiments with multilinear Radon-like transforms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed for every random choice; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for report.json and the CSV tables.
    #[arg(long, global = true, default_value = "rblab-out")]
    pub out: PathBuf,
    /// Sample or instance count, where the command has one.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Knapp delta ladder, strictly decreasing.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ladder: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supremum of the testing functional over bases and grid points.
    Testing { config: PathBuf },
    /// Infimum of the dual Q functional.
    Q { config: PathBuf },
    /// Knapp lower bound compared with the testing value.
    Knapp {
        config: PathBuf,
        /// Accept problems with sum k q / p > n and show that the ratio blows up.
        #[arg(long)]
        supercritical: bool,
    },
    /// Closed-form cyclic paraboloid system.
    Paraboloid {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        l: usize,
        #[arg(long)]
        p: f64,
        /// Spread of the random unimodular bases.
        #[arg(long, default_value_t = 0.5)]
        spread: f64,
    },
    /// Fading zone, visibility and extremal basis of a discrete measure.
    Visibility {
        config: Option<PathBuf>,
        /// Dimension of the random measure used without a config.
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        atoms: usize,
    },
    /// Randomized Gram-determinant and minor-norm identities.
    GramSuite,
    /// All invariant suites; exits nonzero iff a property fails.
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Testing { .. } => "testing",
            Command::Q { .. } => "q",
            Command::Knapp { .. } => "knapp",
            Command::Paraboloid { .. } => "paraboloid",
            Command::Visibility { .. } => "visibility",
            Command::GramSuite => "gram-suite",
            Command::Verify => "verify",
        }
    }
}

/// Runs a command and returns its report, without writing anything.
pub fn execute(cli: &Cli) -> Result<(RunReport, Vec<report::Table>), CliError> {
    let start = Instant::now();
    let opts = RunOptions { seed: cli.seed, samples: cli.samples, ladder: cli.ladder.clone() };
    let load = |p: &PathBuf| config::parse_config(p).map_err(CliError::Config);
    let mut digest = None;
    let mut seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let outcome: Outcome = match &cli.command {
        Command::Testing { config } | Command::Q { config } | Command::Knapp { config, .. } => {
            let c = load(config)?;
            digest = Some(c.digest.clone());
            seed = c.optimizer(cli.seed).seed;
            match &cli.command {
                Command::Testing { .. } => commands::testing(&c, &opts)?,
                Command::Q { .. } => commands::q(&c, &opts)?,
                Command::Knapp { supercritical, .. } => commands::knapp(&c, &opts, *supercritical)?,
                _ => unreachable!(),
            }
        }
        Command::Paraboloid { n, l, p, spread } => {
            commands::paraboloid(&ParaboloidArgs { n: *n, l: *l, p: *p, spread: *spread }, &opts)?
        }
        Command::Visibility { config, n, atoms } => {
            let c = config.as_ref().map(load).transpose()?;
            digest = c.as_ref().map(|c| c.digest.clone());
            commands::visibility(c.as_ref(), RandomMeasure { n: *n, atoms: *atoms }, &opts)?
        }
        Command::GramSuite => commands::gram_suite_cmd(&opts)?,
        Command::Verify => commands::verify(&opts)?,
    };
    let report = RunReport {
        command: cli.command.name().into(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_digest: digest,
        status: outcome.status,
        summary: outcome.summary,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        steps: outcome.steps,
        tables: outcome.tables.iter().map(|t| format!("{}.csv", t.name)).collect(),
    };
    Ok((report, outcome.tables))
}

/// Parses arguments, runs, writes artifacts and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok((report, tables)) => {
            if let Err(e) = write_artifacts(&cli.out, &report, &tables) {
                eprintln!("error: writing {}: {e}", cli.out.display());
                return 1;
            }
            println!("{}: {}", report.command, report.summary);
            report.status.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            Status::Failed.exit_code()
        }
    }
}
