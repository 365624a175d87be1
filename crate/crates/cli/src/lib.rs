//! Command-line front end: one subcommand per pipeline stage, configured by a
//! JSON file of flat dotted keys plus `--key value` overrides.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::Parser;
use thiserror::Error;

pub use commands::{command, Command, COMMANDS};
pub use config::{resolve, ConfigError, Overrides, RunConfig, Schema};

/// Default output directory when set.
pub const OUT_DIR_ENV: &str = "ECGNET_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input not found: {0}")]
    MissingInput(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Dataset(#[from] ecgnet::dataset::DatasetError),
    #[error(transparent)]
    Synth(#[from] ecgnet::synth::SynthError),
    #[error(transparent)]
    Model(#[from] ecgnet::model::ModelError),
    #[error(transparent)]
    Train(#[from] ecgnet::train::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] ecgnet::train::CheckpointError),
    #[error(transparent)]
    Metrics(#[from] ecgnet::metrics::MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Where a run writes its log and, by default, its artifacts.
pub struct Context {
    pub out_dir: PathBuf,
    log: Box<dyn Write + Send>,
}

impl Context {
    pub fn new(out_dir: impl Into<PathBuf>, log: Box<dyn Write + Send>) -> Self {
        Self {
            out_dir: out_dir.into(),
            log,
        }
    }

    /// Output directory from the environment, falling back to `ecgnet-out`.
    pub fn from_env(log: Box<dyn Write + Send>) -> Self {
        let dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("ecgnet-out"), PathBuf::from);
        Self::new(dir, log)
    }

    pub fn log(&mut self, msg: std::fmt::Arguments<'_>) {
        // a closed log stream must not fail the run
        let _ = writeln!(self.log, "{msg}");
    }
}

#[derive(Parser, Debug)]
#[command(name = "ecgnet", about = "Multi-task residual 1D-CNN for 12-lead ECG")]
struct Cli {
    /// synth | resample | split | train | eval | experiment | predict
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(COMMANDS.iter().map(|c| c.name())))]
    command: String,
    /// `--config FILE` and `--key value` settings.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    settings: Vec<String>,
}

/// Resolves the configuration for `name` from raw settings arguments.
pub fn parse_config(name: &str, settings: &[String], ctx: &Context) -> Result<RunConfig> {
    let cmd = command(name).ok_or_else(|| ConfigError::BadArgument(name.into()))?;
    let overrides = Overrides::parse(settings)?;
    let schema = cmd.schema(ctx, &overrides)?;
    Ok(resolve(name, &schema, &overrides)?)
}

/// Parses, logs the resolved configuration and seed, then runs.
pub fn run_command(name: &str, settings: &[String], ctx: &mut Context) -> Result<()> {
    let cfg = parse_config(name, settings, ctx)?;
    let cmd = command(name).expect("parse_config checked the name");
    ctx.log(format_args!("resolved config for `{name}`:\n{}", cfg.to_json()));
    match cmd.seed(&cfg) {
        Some(seed) => ctx.log(format_args!("seed: {seed}")),
        None => ctx.log(format_args!("seed: none (deterministic)")),
    }
    cmd.run(&cfg, ctx)
}

/// Entry point shared by the binary and tests; returns the exit status.
pub fn main_with_args(args: impl IntoIterator<Item = String>, ctx: &mut Context) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code == 0 {
                let _ = writeln!(std::io::stdout(), "\ncommands:");
                for c in COMMANDS {
                    let _ = writeln!(std::io::stdout(), "  {:<11} {}", c.name(), c.about());
                }
            }
            return code;
        }
    };
    match run_command(&cli.command, &cli.settings, ctx) {
        Ok(()) => 0,
        Err(e) => {
            ctx.log(format_args!("error: {e}"));
            e.exit_code()
        }
    }
}
