//! Command-line surface over `crossview-core`.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Overrides, RunConfig};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "CROSSVIEW_CONFIG";

/// An error with its process exit code: 1 for usage and config problems,
/// 2 for runtime and data problems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(e: impl fmt::Display) -> Self {
        Self { code: 1, message: e.to_string() }
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        Self { code: 2, message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<crossview_core::Error> for Failure {
    fn from(e: crossview_core::Error) -> Self {
        Failure::runtime(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "crossview", version, about = "Cross-image attention and preference training on a toy multimodal decoder")]
pub struct Cli {
    /// TOML run config; defaults apply when absent.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Key-token ratio.
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    /// Weight of the likelihood term.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Preference temperature.
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Mask policy (or mask kind for dump-mask).
    #[arg(long, global = true)]
    pub mask_mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train and eval datasets.
    GenData,
    /// Generate preference pairs from the backbone.
    GenPairs,
    /// Generate pairs, then run preference training.
    Train,
    /// Evaluate a checkpoint under one mask policy.
    Eval {
        /// Checkpoint to evaluate; defaults to `<out>/model.ckpt`.
        checkpoint: Option<PathBuf>,
    },
    /// Write the visibility matrix for the configured layout.
    DumpMask,
    /// Sweep the key-token ratio and the likelihood weight.
    Ablate,
    /// Finite-difference check of the training gradients.
    GradCheck,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            rho: self.rho,
            lambda: self.lambda,
            beta: self.beta,
            mask_mode: self.mask_mode.clone(),
            out: self.out.clone(),
        }
    }

    /// Loads, overrides and validates the config. Nothing is written before
    /// this succeeds.
    pub fn effective_config(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply(&self.overrides(), matches!(self.command, Command::DumpMask))?;
        cfg.validate()?;
        if matches!(self.command, Command::DumpMask) {
            config::check_dump_kind(&cfg.dump.kind)?;
        }
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = cli.effective_config()?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::GenPairs => commands::gen_pairs(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Eval { checkpoint } => commands::eval_cmd(&cfg, checkpoint.as_deref()),
        Command::DumpMask => commands::dump_mask(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::GradCheck => commands::grad_check_cmd(&cfg),
    }
}

/// Parses `args` and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
