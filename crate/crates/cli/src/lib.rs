//! Command implementations behind the `ntkal` binary.

pub mod bench;
pub mod config;
pub mod report;
pub mod run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] config::ConfigError),

    #[error("seed {seed}: {source}")]
    Run {
        seed: u64,
        #[source]
        source: ntkal::Error,
    },

    #[error(transparent)]
    Core(#[from] ntkal::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Caps the global worker pool. Safe to call once per process.
pub fn set_threads(threads: Option<usize>) {
    let n = threads.or_else(|| std::env::var("NTKAL_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = n.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
