use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use frglab_cli::{run, Command, Format, RunOptions};

/// Functional renormalization group experiments on lattice scalar fields.
#[derive(Debug, Parser)]
#[command(name = "frglab", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `outputs.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `sampler.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let options = RunOptions {
        out: args.out,
        seed: args.seed,
        threads: args.threads,
        format: args.format,
    };
    match run(args.command, &args.config, &options) {
        Ok(files) => {
            for f in files {
                eprintln!("wrote {f}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("frglab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
