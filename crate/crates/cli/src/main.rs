mod commands;
mod config;
mod plot;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit code 1: bad input or configuration. Exit code 2: failure while running.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "ovsg", version, about = "Open-vocabulary scene graph generation on precomputed features")]
struct Cli {
    /// Worker threads for per-image work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with feature fixtures.
    Gen(Overrides),
    /// Build a benchmark split from a dataset.
    Split(Overrides),
    /// Pretrain a teacher on caption pseudo-labels.
    Pretrain(Overrides),
    /// Fine-tune on a split, optionally distilling from a teacher.
    Finetune(Overrides),
    /// Predict and score a checkpoint on a dataset.
    Eval(Overrides),
    /// Print parsed caption triplets.
    ParseCaptions(Overrides),
}

/// `--config FILE` and `--dotted.key value` overrides.
#[derive(clap::Args)]
struct Overrides {
    #[arg(num_args = 0.., allow_hyphen_values = true, trailing_var_arg = true, value_name = "ARGS")]
    args: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Gen(o) => commands::gen(&o.args),
        Command::Split(o) => commands::split(&o.args),
        Command::Pretrain(o) => commands::pretrain(&o.args),
        Command::Finetune(o) => commands::finetune(&o.args),
        Command::Eval(o) => commands::eval(&o.args),
        Command::ParseCaptions(o) => commands::parse_captions(&o.args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.code())
        }
    }
}
