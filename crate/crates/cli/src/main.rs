//! `a2rnet` command-line tool.
//!
//! Exit codes: 0 on success, 1 on invalid input (flags, config, data),
//! 2 on runtime failure.

mod commands;
mod gradcheck;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "a2rnet", version, about = "Adversarially robust infrared/visible image fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "a2rnet-out")]
    pub out: PathBuf,
    /// Shorthand for `--override train.seed=INT`, applied last.
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the fusion network on the manifest's pairs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue the run already stored in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run PGD against a checkpoint and write adversarial inputs and loss traces.
    Attack {
        #[command(flatten)]
        common: Common,
    },
    /// Fuse every pair of the manifest with a checkpoint.
    Fuse {
        #[command(flatten)]
        common: Common,
    },
    /// Score clean and attacked fusion with the metric suite.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Generate (or refresh) the pseudo-label cache for the manifest.
    LabelGen {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Random seeds per primitive.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { common, resume } => commands::train(&common, resume),
        Command::Attack { common } => commands::attack(&common),
        Command::Fuse { common } => commands::fuse(&common),
        Command::Evaluate { common } => commands::evaluate(&common),
        Command::LabelGen { common } => commands::label_gen(&common),
        Command::Gradcheck { seeds, step } => gradcheck::run(seeds, step),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
