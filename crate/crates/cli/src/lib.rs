//! Command-line front end for the `rahn` pipeline.
//!
//! Every command reads one JSON experiment config, applies overrides, echoes
//! the resolved config into its outputs and writes files atomically.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | usage or config error |
//! | 3 | data error (missing/malformed input, degenerate clustering) |
//! | 4 | training diverged |
//! | 5 | checkpoint incompatible with the config or data |
//! | 6 | every sweep cell failed |

mod commands;
mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rahn::config::{apply_override, parse_override, ExperimentConfig};
use rahn::Error;

pub use commands::{
    cmd_evaluate, cmd_gen_fixture, cmd_reputation, cmd_sweep, cmd_train, load_inputs, Inputs,
    SweepOutputs, TrainOutputs,
};
pub use output::write_atomic;

pub const REPUTATIONS_CSV: &str = "reputations.csv";
pub const REPUTATION_SUMMARY: &str = "reputation_summary.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_REPORT: &str = "report.json";
pub const TIMING: &str = "timing.json";
pub const EVALUATION: &str = "evaluation.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.json";

/// Environment variable that overrides `protocol.seed`.
pub const SEED_ENV: &str = "RAHN_SEED";

#[derive(Debug, Parser)]
#[command(name = "rahn", version, about = "Reputation-aware hourglass network for QoS prediction")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster users and services and write their reputations.
    Reputation {
        #[command(flatten)]
        common: CommonArgs,
        /// Use every observed entry instead of the training split.
        #[arg(long)]
        full: bool,
    },
    /// Train at the first configured density; write checkpoint and report.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score a checkpoint on the test split of the first configured density.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the cartesian grid over N, PE, d and densities.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Write a seeded synthetic matrix, region lists and a matching config.
    GenFixture(FixtureArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.d=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed; beats both the config and RAHN_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Stack counts N.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [0usize, 1, 2])]
    pub n_stack: Vec<usize>,
    /// Position-embedding flags (0/1).
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [0u8, 1])]
    pub pe: Vec<u8>,
    /// Latent dimensions d.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [8usize])]
    pub d: Vec<usize>,
    /// Training densities; the config's list when omitted.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub densities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub users: usize,
    #[arg(long, default_value_t = 100)]
    pub services: usize,
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Fraction of cells observed at all.
    #[arg(long, default_value_t = 1.0)]
    pub observed: f64,
    #[arg(long, default_value_t = 4)]
    pub user_regions: usize,
    #[arg(long, default_value_t = 6)]
    pub service_regions: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 2,
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Lookup(_)
        | Error::DegenerateCluster(_) => 3,
        Error::Diverged { .. } => 4,
        Error::IncompatibleCheckpoint(_) => 5,
        _ => 1,
    }
}

/// Builds the effective config: file (or defaults), then `RAHN_SEED`, then
/// `--set` overrides, then `--seed`. Relative paths in a config file are
/// taken relative to that file's directory.
pub fn resolve_config(args: &CommonArgs, env_seed: Option<&str>) -> Result<ExperimentConfig, Error> {
    let (mut doc, base) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let doc: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            (doc, path.parent().map(Path::to_path_buf))
        }
        None => (ExperimentConfig::default().to_value(), None),
    };
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        apply_override(&mut doc, "protocol.seed", &seed.to_string())?;
    }
    for o in &args.overrides {
        let (key, value) = parse_override(o)?;
        apply_override(&mut doc, key, value)?;
    }
    if let Some(seed) = args.seed {
        apply_override(&mut doc, "protocol.seed", &seed.to_string())?;
    }
    let mut config = ExperimentConfig::from_value(doc)?;
    if let Some(base) = base.filter(|b| !b.as_os_str().is_empty()) {
        let paths = &mut config.paths;
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        paths.matrix.as_mut().map(rebase);
        paths.user_metadata.as_mut().map(rebase);
        paths.service_metadata.as_mut().map(rebase);
        rebase(&mut paths.output_dir);
    }
    config.validate()?;
    Ok(config)
}

fn resolve(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    resolve_config(common, std::env::var(SEED_ENV).ok().as_deref())
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Reputation { common, full } => {
            let config = resolve(&common)?;
            cmd_reputation(&config, full)?;
        }
        Command::Train { common } => {
            let config = resolve(&common)?;
            let out = cmd_train(&config)?;
            println!("{}", out.evaluation.table_row());
        }
        Command::Evaluate { common, checkpoint } => {
            let config = resolve(&common)?;
            let report = cmd_evaluate(&config, &checkpoint)?;
            println!("{}", report.table_row());
            for b in &report.baselines {
                println!("  {:<13} MAE={:.4}  RMSE={:.4}", format!("{:?}", b.kind), b.mae, b.rmse);
            }
        }
        Command::Sweep { common, grid } => {
            let config = resolve(&common)?;
            let grid = rahn::eval::SweepGrid {
                n_stack: grid.n_stack,
                use_pe: grid.pe.iter().map(|&p| p != 0).collect(),
                d: grid.d,
                densities: grid.densities.unwrap_or_else(|| config.protocol.densities.clone()),
            };
            let out = cmd_sweep(&config, &grid)?;
            if out.n_failed == out.cells.len() {
                return Err(CliError {
                    code: 6,
                    message: format!("all {} sweep cells failed", out.n_failed),
                });
            }
            if out.n_failed > 0 {
                eprintln!("{} of {} sweep cells failed", out.n_failed, out.cells.len());
            }
        }
        Command::GenFixture(args) => {
            cmd_gen_fixture(&args)?;
        }
    }
    Ok(())
}
