//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::commands::{self, EvalArgs, FuseArgs, Suite};
use crate::config::{ConditionerKind, LoadedConfig, RunConfig};
use crate::error::CliResult;
use crate::report::Report;

#[derive(Parser, Debug)]
#[command(name = "mofu", version, about = "Order-independent reference fusion on a toy video DiT")]
#[command(after_help = "Exit codes: 0 pass, 1 threshold failure, 2 config error, 3 I/O or corrupt input.")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply to missing keys.
    #[arg(long, global = true, env = "MOFU_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "MOFU_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the default configuration, one comment per key.
    Defaults,
    /// Write the synthetic dataset: frames, masks, references, manifest.
    Data {
        #[arg(long, env = "MOFU_OUT")]
        out: PathBuf,
    },
    /// Write an untrained checkpoint.
    Init {
        /// Checkpoint path.
        #[arg(long, env = "MOFU_OUT")]
        out: PathBuf,
        /// Random weights everywhere instead of zero adapter outputs and head.
        #[arg(long)]
        random: bool,
    },
    /// Fuse a directory of `name.png` + `name.mask.png` references.
    Fuse {
        #[arg(long)]
        input: PathBuf,
        /// Fused tensor path; the report goes to `<out>.report.json`.
        #[arg(long, env = "MOFU_OUT")]
        out: PathBuf,
        /// Radial cutoff in (0, 1); defaults to train.cutoff_ratio.
        #[arg(long, env = "MOFU_CUTOFF")]
        cutoff: Option<f64>,
        /// Take the reference encoder from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on the synthetic dataset.
    Train {
        /// Output directory: loss.csv, checkpoints, report.json, metrics.json.
        #[arg(long, env = "MOFU_OUT")]
        out: PathBuf,
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, env = "MOFU_SUITE", default_value = "all")]
        suite: Suite,
        /// Conditioner for the perm suite.
        #[arg(long, value_enum, env = "MOFU_CONDITIONER")]
        conditioner: Option<ConditionerKind>,
        /// Directory for report.json and metrics.json.
        #[arg(long, env = "MOFU_OUT")]
        out: Option<PathBuf>,
    },
}

fn load(path: Option<&Path>) -> CliResult<LoadedConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default_loaded()),
    }
}

/// Runs a parsed command line; `Ok(None)` for commands without a report.
pub fn dispatch(cli: &Cli) -> CliResult<Option<Report>> {
    let seed = cli.seed;
    let report = match &cli.command {
        Command::Defaults => {
            print!("{}", commands::defaults());
            return Ok(None);
        }
        Command::Data { out } => commands::data(&load(cli.config.as_deref())?, seed, out)?,
        Command::Init { out, random } => commands::init(&load(cli.config.as_deref())?, seed, out, *random)?,
        Command::Fuse { input, out, cutoff, checkpoint } => {
            let config = load(cli.config.as_deref())?;
            commands::fuse(&FuseArgs { input, out, cutoff: *cutoff, seed, config: &config, checkpoint: checkpoint.as_deref() })?
        }
        Command::Train { out, resume } => commands::train(&load(cli.config.as_deref())?, seed, out, resume.as_deref())?,
        Command::Eval { checkpoint, suite, conditioner, out } => {
            let config = cli.config.as_deref().map(RunConfig::load).transpose()?;
            commands::eval(&EvalArgs {
                checkpoint,
                suite: *suite,
                seed,
                config: config.as_ref(),
                conditioner: *conditioner,
                out: out.as_deref(),
            })?
        }
    };
    Ok(Some(report))
}

/// Parses `args`, runs the command, prints the report and returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(None) => 0,
        Ok(Some(report)) => {
            println!("{}", report.to_json());
            if report.passed {
                0
            } else {
                eprintln!("mofu: {} did not pass its thresholds", report.command);
                1
            }
        }
        Err(e) => {
            eprintln!("mofu: {e}");
            e.exit_code()
        }
    }
}
