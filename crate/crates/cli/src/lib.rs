//! Command-line driver: every experiment step reads one [`ExperimentConfig`],
//! derives all randomness from its seed, and writes its artifacts plus a
//! manifest under the output directory.

pub mod artifacts;
mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use comanip::dyad::PrimitiveKind;

pub use artifacts::Artifacts;
pub use config::{load_config, ConfigError, ExperimentConfig, Override};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "comanip",
    version,
    about = "Seeded co-manipulation experiments",
    after_help = "Any config field can be overridden with a dotted flag, e.g. `--ppo.clip 0.3` or `--intent.net.width=32`."
)]
struct Cli {
    /// TOML config file (JSON if the name ends in .json).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Artifact directory; overrides the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Follower {
    Learned,
    Admittance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Adaptive,
    Baseline,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the demonstration grid; write logs and the windowed dataset.
    GenData,
    /// Train the intent model; evaluate it on the held-out repetition.
    TrainIntent {
        /// Dataset from gen-data; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the velocity command for one frame of a log.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Frame index; defaults to the last frame.
        #[arg(long)]
        frame: Option<usize>,
    },
    /// Closed-loop simulation of one primitive.
    Rollout {
        /// Intent checkpoint, required for the learned follower.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        primitive: PrimitiveKind,
        /// Payload [kg]; defaults to rollout.payload.
        #[arg(long)]
        payload: Option<f64>,
        #[arg(long, value_enum, default_value_t = Follower::Learned)]
        follower: Follower,
    },
    /// Train velocity-tracking policies.
    TrainPpo {
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
    },
    /// Compare the two policies at the held-out payload.
    EvalPpo {
        /// Defaults to ppo_adaptive.json in the output directory.
        #[arg(long)]
        adaptive: Option<PathBuf>,
        /// Defaults to ppo_baseline.json in the output directory.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Score trials given as CSV files or dyad logs.
    Metrics {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "Trials")]
        label: String,
    },
    /// Whole pipeline from one seed, ending in the comparison report.
    Reproduce,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainIntent { .. } => "train-intent",
            Command::Infer { .. } => "infer",
            Command::Rollout { .. } => "rollout",
            Command::TrainPpo { .. } => "train-ppo",
            Command::EvalPpo { .. } => "eval-ppo",
            Command::Metrics { .. } => "metrics",
            Command::Reproduce => "reproduce",
        }
    }
}

/// Pulls `--a.b value` and `--a.b=value` out of the argument list. Everything
/// after a bare `--` is left alone.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<Override>), ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        if flag.is_empty() {
            rest.push(arg);
            rest.extend(it);
            break;
        }
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let key = key.to_string();
        let value = match inline {
            Some(v) => v,
            None => match it.next().map(|v| v.into_string()) {
                Some(Ok(v)) if !v.starts_with("--") => v,
                _ => return Err(ConfigError::MissingValue(key)),
            },
        };
        overrides.push(Override { key, value });
    }
    Ok((rest, overrides))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stderr, results to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    match execute(args) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprint!("{msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (args, overrides) = split_overrides(args.into_iter().map(Into::into).collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    let mut config = load_config(cli.config.as_deref(), &overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    let mut art = Artifacts::create(&config.out)?;
    let result = art
        .write(artifacts::CONFIG_ECHO, config.to_toml())
        .map_err(CliError::from)
        .and_then(|_| commands::dispatch(&cli.command, &config, &mut art));
    match result {
        Ok(()) => {
            art.finish(cli.command.name(), config.seed, &config.hash())?;
            Ok(())
        }
        Err(e) => {
            art.rollback();
            Err(e)
        }
    }
}
