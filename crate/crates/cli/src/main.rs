use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossfuse_cli::{commands, Globals, UsageError};

#[derive(Parser)]
#[command(name = "crossfuse", version, about = "Dual-stream visible/infrared detection experiments")]
struct Cli {
    #[command(flatten)]
    globals: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML experiment configuration; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (dataset root for `synth`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a paired visible/infrared dataset to disk.
    Synth {
        #[arg(long = "train", value_name = "N")]
        n_train: Option<usize>,
        #[arg(long = "val", value_name = "N")]
        n_val: Option<usize>,
        #[arg(long = "test", value_name = "N")]
        n_test: Option<usize>,
    },
    /// Check every backward pass against central differences.
    Gradcheck {
        /// Scale every analytic gradient by 1.01 (checker self-test).
        #[arg(long, hide = true)]
        corrupt_vjp: bool,
    },
    /// Train a detector, writing a per-epoch log and checkpoint.
    Train {
        /// Continue from a saved checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train and evaluate the seven component ablation rows.
    Ablation {
        /// Report per-row medians over this many consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Run the structural invariant suite.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = Globals {
        config: cli.globals.config,
        seed: cli.globals.seed,
        out: cli.globals.out,
        force: cli.globals.force,
    };
    let result = match &cli.command {
        Command::Synth { n_train, n_val, n_test } => commands::synth(&g, *n_train, *n_val, *n_test),
        Command::Gradcheck { corrupt_vjp } => commands::gradcheck(&g, *corrupt_vjp),
        Command::Train { resume } => commands::train(&g, resume.as_deref()),
        Command::Eval { checkpoint, split } => commands::eval(&g, checkpoint, split),
        Command::Ablation { seeds } => commands::ablation(&g, *seeds),
        Command::Selftest => commands::selftest(&g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                // verification failures and runtime errors alike
                ExitCode::from(1)
            }
        }
    }
}
