//! `gee`: fit, diagnose and simulate from the command line.
//!
//! Exit codes: 0 success, 1 error, 2 completed with warnings (non-converged
//! fit, or a simulation with more than 2% failed replicates). Errors are
//! reported on stderr as a single-line `{"error": kind, "detail": message}`.

pub mod commands;
pub mod dataset;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use gee_core::model::LinkFamily;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "gee",
    version,
    about = "Two-step pseudo-likelihood GEE for longitudinal data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Independence,
    TwoStep,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a marginal model to a long-format CSV dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_link)]
        link: LinkFamily,
        #[arg(long, value_enum, default_value = "two-step")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        ci_level: f64,
        /// Reorder subjects with this seed before fitting.
        #[arg(long, value_name = "SEED")]
        shuffle_subjects: Option<u64>,
        /// Iteration cap for each solver stage.
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
    },
    /// Report regularity quantities and their trends over subject prefixes.
    Diagnose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_link)]
        link: LinkFamily,
        /// Comma-separated parameter; defaults to a working-independence fit.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        beta: Option<Vec<f64>>,
        /// Comma-separated increasing prefix sizes.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
        #[arg(long, default_value_t = gee_core::diagnostics::DEFAULT_DET_FLOOR)]
        det_floor: f64,
        /// Radius of the local ball probed for the derivative maxima.
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo study described by a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides `base_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-replicate CSV dump.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_link(s: &str) -> Result<LinkFamily, String> {
    s.parse().map_err(|e: gee_core::GeeError| e.to_string())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::Usage(
                e.to_string()
                    .lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .to_string(),
            );
            eprintln!("{}", err.to_json_line());
            return 1;
        }
    };
    match commands::execute(&cli.command) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            1
        }
    }
}
