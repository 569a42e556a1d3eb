use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ntkal_cli::bench::{cmd_bench, BenchMode, BenchParams};
use ntkal_cli::config::ExperimentConfig;
use ntkal_cli::report::cmd_report;
use ntkal_cli::run::cmd_run;
use ntkal_cli::{set_threads, CliError};

#[derive(Parser)]
#[command(name = "ntkal", version, about = "NTK look-ahead active learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    BlockVsDirect,
    KernelVsSgd,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker thread cap (default: NTKAL_THREADS, else all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Time look-ahead scoring against its direct alternative.
    Bench {
        mode: Mode,
        #[arg(long)]
        l: usize,
        #[arg(long)]
        u: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
        /// Print the full JSON report.
        #[arg(long)]
        json: bool,
    },
    /// Plot accuracy curves from run CSVs.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            threads,
        } => {
            set_threads(threads);
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let output = cmd_run(&cfg, &out)?;
            for s in &output.summary {
                println!(
                    "seed {}: final accuracy {:.4}, mean query {:.4}s, mean train {:.4}s -> {}",
                    s.seed,
                    s.final_accuracy,
                    s.mean_query_seconds,
                    s.mean_train_seconds,
                    s.csv.display()
                );
            }
        }
        Command::Bench {
            mode,
            l,
            u,
            width,
            epochs,
            reps,
            seed,
            threads,
            json,
        } => {
            set_threads(threads);
            let params = BenchParams {
                labeled: l,
                candidates: u,
                width,
                epochs,
                reps,
                seed,
            };
            let mode = match mode {
                Mode::BlockVsDirect => BenchMode::BlockVsDirect,
                Mode::KernelVsSgd => BenchMode::KernelVsSgd,
            };
            let report = cmd_bench(mode, &params)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{}", report.line());
            }
        }
        Command::Report { inputs, out } => {
            let curves = cmd_report(&inputs, &out)?;
            println!("{} curves -> {}", curves.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
