use std::path::PathBuf;
use std::process::ExitCode;

use altlora::cli::{cmd_report, cmd_sweep, cmd_train, cmd_verify, resolve_out, Exit, Overrides};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "altlora", version, about = "Alternating LoRA optimizers: verification, runs and sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle and invariance checks and write a JSON report.
    Verify {
        /// Glob over check names, e.g. `projector*`.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: $ALTLORA_OUT or ./altlora-out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration and write its CSV and sidecar.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of the config's grid, skipping completed cells.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Summarise a directory of runs.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { filter, seed, out } => {
            cmd_verify(filter.as_deref(), seed, &resolve_out(out.as_deref(), None))
        }
        Command::Train { config, seed, out } => cmd_train(&config, &Overrides { seed, out }),
        Command::Sweep {
            config,
            seed,
            out,
            threads,
        } => cmd_sweep(&config, &Overrides { seed, out }, threads),
        Command::Report { dir } => cmd_report(&dir),
    };
    let exit = result.unwrap_or_else(|err| {
        eprintln!("error: {err}");
        Exit::for_error(&err)
    });
    ExitCode::from(exit.code() as u8)
}
