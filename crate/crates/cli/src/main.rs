//! `burstforge`: burst restoration from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use burstforge::model::Task;
use burstforge::selftest::Fault;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{EvalArgs, InferArgs, SimulateArgs, TrainArgs};
use crate::error::CliError;

const THREADS_VAR: &str = "BURSTFORGE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "burstforge",
    version,
    about = "Burst super-resolution, low-light enhancement and denoising"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise a burst dataset from a directory of sRGB images.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        /// Directory of source PNG images.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Noise level from the gain table.
        #[arg(long)]
        gain: Option<u32>,
        #[arg(long)]
        burst_size: Option<usize>,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        no_noise: bool,
    },
    /// Train a model; writes the checkpoint, `<out>.loss.csv` and `<out>.config.json`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `io.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore one burst directory to a PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        burst: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset (PSNR and SSIM).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        ground_truth_as_prediction: bool,
    },
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    OffsetLayout,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "{THREADS_VAR} must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            config,
            task,
            corpus,
            count,
            out,
            seed,
            gain,
            burst_size,
            crop,
            no_noise,
        } => commands::simulate(&SimulateArgs {
            config,
            task,
            corpus,
            count,
            out,
            seed,
            gain,
            burst_size,
            crop,
            no_noise,
        }),
        Command::Train {
            config,
            out,
            dataset,
            resume,
        } => commands::train(&TrainArgs {
            config,
            out,
            dataset,
            resume,
        }),
        Command::Infer { ckpt, burst, out } => commands::infer(&InferArgs { ckpt, burst, out }),
        Command::Eval {
            ckpt,
            dataset,
            out,
            ground_truth_as_prediction,
        } => commands::eval(&EvalArgs {
            ckpt,
            dataset,
            out,
            ground_truth_as_prediction,
        }),
        Command::Selftest { inject_fault } => {
            commands::selftest(inject_fault.map(|FaultArg::OffsetLayout| Fault::OffsetLayout))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
