//! The `run` command: one experiment, every configured seed, CSV per seed
//! plus a JSON summary.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ntkal::pool::{run_al, CycleRecord};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const CSV_HEADER: [&str; 8] = [
    "cycle",
    "labeled_size",
    "test_accuracy",
    "query_seconds",
    "train_seconds",
    "strategy",
    "seed",
    "degenerate_skipped",
];

/// Per-seed aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub final_accuracy: f64,
    pub mean_query_seconds: f64,
    pub mean_train_seconds: f64,
    pub csv: PathBuf,
}

/// Contents of the JSON summary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub records: Vec<CycleRecord>,
    pub summary: Vec<RunSummary>,
    pub config_echo: ExperimentConfig,
}

pub fn write_records_csv(path: &Path, records: &[CycleRecord]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path)?));
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs every seed of `config` and writes `<name>_seed<N>.csv` files and
/// `<name>_summary.json` into `out_dir`.
pub fn cmd_run(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let (train, test) = config.data.load()?;
    let mut all = Vec::new();
    let mut summary = Vec::new();
    for &seed in &config.seeds {
        let run = config.run_for_seed(seed);
        let records = run_al(&run, &train, &test).map_err(|e| CliError::Run { seed, source: e })?;
        let csv = out_dir.join(format!("{}_seed{seed}.csv", config.name));
        write_records_csv(&csv, &records)?;
        let last = records.last().map(|r| r.test_accuracy).unwrap_or(0.0);
        eprintln!(
            "{}: seed {seed} final accuracy {last:.4} ({} cycles)",
            config.name,
            records.len()
        );
        summary.push(RunSummary {
            seed,
            final_accuracy: last,
            mean_query_seconds: mean(records.iter().map(|r| r.query_seconds)),
            mean_train_seconds: mean(records.iter().map(|r| r.train_seconds)),
            csv,
        });
        all.extend(records);
    }
    let output = ExperimentOutput {
        records: all,
        summary,
        config_echo: config.clone(),
    };
    let path = out_dir.join(format!("{}_summary.json", config.name));
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &output)?;
    Ok(output)
}
