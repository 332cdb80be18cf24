use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nestmc::harness::acceptance::{run_suite, Suite};
use nestmc::harness::{problem_catalogue, run, Overrides, RunConfig};
use nestmc::Error;

/// Nested Monte Carlo PDE solver.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured sweep and write the CSV table.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of outer-sample shards (default: available cores).
        #[arg(long)]
        shards: Option<usize>,
        #[arg(long)]
        ipart_min: Option<u32>,
        #[arg(long)]
        ipart_max: Option<u32>,
        /// CSV path; stdout when neither this nor the config sets one.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave wall_seconds empty for byte-reproducible output.
        #[arg(long)]
        no_timing: bool,
    },
    /// Run an acceptance suite and print one line per criterion.
    Acceptance {
        /// One of portfolio-d1, zariphopoulou, cir, toy, unbiased, weights,
        /// golden, variance, determinism, gamma, all.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        shards: usize,
    },
    /// List the problem kinds accepted in configs.
    ListProblems,
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_numerical() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            shards,
            ipart_min,
            ipart_max,
            out,
            no_timing,
        } => {
            let mut cfg = match RunConfig::from_path(&config) {
                Ok(c) => c,
                Err(e) => return exit_for(&e),
            };
            cfg.apply(&Overrides {
                seed,
                shards,
                ipart_min,
                ipart_max,
                output: out,
                no_timing,
            });
            match run(&cfg) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => exit_for(&e),
            }
        }
        Command::Acceptance { suite, shards } => {
            let suite: Suite = match suite.parse() {
                Ok(s) => s,
                Err(e) => return exit_for(&e),
            };
            let shards = if shards == 0 {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            } else {
                shards
            };
            match run_suite(suite, shards) {
                Ok(criteria) => {
                    for c in &criteria {
                        println!("{c}");
                    }
                    let failed = criteria.iter().filter(|c| !c.passed).count();
                    println!("{} passed, {failed} failed", criteria.len() - failed);
                    if failed == 0 {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(2)
                    }
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::ListProblems => {
            for (id, what) in problem_catalogue() {
                println!("{id:<12} {what}");
            }
            ExitCode::SUCCESS
        }
    }
}
