use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfmfg_cli::{kernel_bench, parse_config, run, status, CliError, RunOptions};

#[derive(Parser)]
#[command(
    name = "rfmfg",
    version,
    about = "Random-feature solver for nonlocal mean-field games"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured problem and write outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `threads` (0 = all CPUs).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write the kernel error curve and slice only.
    KernelBench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf) -> Result<rfmfg_cli::RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(status::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run { config, out, threads } => load(&config).and_then(|cfg| {
            let options = RunOptions {
                output_dir: out,
                threads,
                quiet: false,
            };
            run(&cfg, &options).map(|outcome| {
                if outcome.converged {
                    status::CONVERGED
                } else {
                    status::NOT_CONVERGED
                }
            })
        }),
        Command::KernelBench { config, out } => load(&config).and_then(|cfg| {
            let options = RunOptions {
                output_dir: out,
                threads: None,
                quiet: false,
            };
            kernel_bench(&cfg, &options).map(|_| status::CONVERGED)
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
