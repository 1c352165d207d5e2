use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lora_gd::{cmd_compare, cmd_run, cmd_verify, Options};

#[derive(Parser)]
#[command(name = "lora-gd", version, about = "Seeded LoRA gradient descent runs with convergence checks")]
struct Cli {
    /// Write outputs here instead of the configured directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run LoRA gradient descent and write the trace.
    Run { config: PathBuf },
    /// Check a run directory against the convergence inequalities.
    Verify { dir: PathBuf },
    /// Run LoRA and full-rank gradient descent from the same start.
    Compare { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let opts = Options {
        out_dir: cli.out_dir,
        quiet: cli.quiet,
    };
    let code = match cli.command {
        Command::Run { config } => cmd_run(&config, &opts),
        Command::Verify { dir } => cmd_verify(&dir, &opts),
        Command::Compare { config } => cmd_compare(&config, &opts),
    };
    ExitCode::from(code as u8)
}
