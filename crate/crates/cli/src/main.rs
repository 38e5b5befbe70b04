mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{InferArgs, Split};

/// Video segmentation with spatial-temporal fusion and memory-augmented
/// refinement, on synthetic moving-shape clips.
#[derive(Parser, Debug)]
#[command(name = "stfmar", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Runs the three training stages and writes params, bank and metrics log.
    Train,
    /// Segments one synthetic clip and writes a map per frame.
    Infer {
        /// Parameters file (default: the configured one inside the output directory).
        #[arg(long)]
        params: Option<PathBuf>,
        /// Memory bank file (default: the configured one inside the output directory).
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Seed of the synthetic data (default: the run seed).
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Clip index within the split.
        #[arg(long, default_value_t = 0)]
        clip: usize,
    },
    /// Rebuilds the memory bank from trained parameters and the training split.
    BuildMemory {
        /// Parameters file (default: the configured one inside the output directory).
        #[arg(long)]
        params: Option<PathBuf>,
        /// Bank file name inside the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Prints dense versus interlaced attention cost and writes a partition sweep.
    Bench,
    /// Runs the fast invariant suite.
    Selftest,
}

fn run(cli: Cli) -> commands::Outcome {
    let mut cfg = commands::load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.out_dir = out;
    }
    if !matches!(cli.command, Command::Selftest) {
        commands::check_config(&cfg)?;
    }
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Infer {
            params,
            bank,
            data_seed,
            split,
            clip,
        } => commands::infer(
            &cfg,
            &InferArgs {
                params,
                bank,
                data_seed,
                split,
                clip,
            },
        ),
        Command::BuildMemory { params, output } => {
            commands::build_memory(&cfg, params.as_deref(), output.as_deref())
        }
        Command::Bench => commands::bench(&cfg),
        Command::Selftest => commands::selftest(),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
