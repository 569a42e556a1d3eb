//! Experiment configuration: a flat `key = value` text format with
//! `[section]` headers.
//!
//! ```text
//! # comment
//! [run]
//! strategy = mlmoc
//! seeds = 0, 1, 2
//! cycles = 10
//!
//! [data]
//! kind = spirals
//! ```
//!
//! The full grammar and every key are listed in the repository README.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ntkal::acquire::{ChangeBaseline, Strategy};
use ntkal::data::{gen_spirals, gen_two_gaussians, load_mnist_idx, Dataset};
use ntkal::kernel::KernelOptions;
use ntkal::linalg::JitterPolicy;
use ntkal::net::{Activation, MlpConfig, TrainConfig};
use ntkal::pool::{ReferenceChoice, RunConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    /// 1-based; 0 for problems not tied to a line.
    pub line: usize,
    pub message: String,
}

impl ConfigError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        ConfigError {
            line,
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Spirals {
        train_per_class: usize,
        test_per_class: usize,
        noise: f64,
        /// Multiplies every generated input coordinate.
        #[serde(default = "unit_scale")]
        scale: f64,
        train_seed: u64,
        test_seed: u64,
    },
    TwoGaussians {
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
        train_seed: u64,
        test_seed: u64,
    },
    Mnist {
        dir: PathBuf,
        pool_size: usize,
        test_size: usize,
        sample_seed: u64,
        center: bool,
    },
}

fn unit_scale() -> f64 {
    1.0
}

impl DataSpec {
    pub fn load(&self) -> ntkal::Result<(Dataset, Dataset)> {
        match self {
            DataSpec::Spirals {
                train_per_class,
                test_per_class,
                noise,
                scale,
                train_seed,
                test_seed,
            } => {
                let mut train = gen_spirals(*train_per_class, *noise, *train_seed)?;
                let mut test = gen_spirals(*test_per_class, *noise, *test_seed)?;
                for v in train.inputs.as_mut_slice().iter_mut().chain(test.inputs.as_mut_slice()) {
                    *v *= scale;
                }
                Ok((train, test))
            }
            DataSpec::TwoGaussians {
                train_per_class,
                test_per_class,
                separation,
                train_seed,
                test_seed,
            } => Ok((
                gen_two_gaussians(*train_per_class, *separation, *train_seed)?,
                gen_two_gaussians(*test_per_class, *separation, *test_seed)?,
            )),
            DataSpec::Mnist {
                dir,
                pool_size,
                test_size,
                sample_seed,
                center,
            } => {
                let train = load_mnist_idx(
                    dir.join("train-images-idx3-ubyte"),
                    dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = load_mnist_idx(
                    dir.join("t10k-images-idx3-ubyte"),
                    dir.join("t10k-labels-idx1-ubyte"),
                )?;
                let mut train = train.sample(*pool_size, *sample_seed);
                let mut test = test.sample(*test_size, sample_seed.wrapping_add(1));
                if *center {
                    let mean = train.center();
                    test.apply_shift(&mean);
                }
                Ok((train, test))
            }
        }
    }

    /// `(input dimension, classes)` without loading anything.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            DataSpec::Mnist { .. } => (784, 10),
            _ => (2, 2),
        }
    }
}

/// A fully resolved experiment; serializes to the `config_echo` of a run
/// summary and can be read back from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    /// Seed fields are overwritten per run.
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn run_for_seed(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            ..self.run.clone()
        }
    }

    /// Parses either the text format or a JSON run summary's `config_echo`.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(0, format!("cannot read {}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            return from_echo(&text);
        }
        parse(&text, path.parent())
    }
}

fn from_echo(text: &str) -> Result<ExperimentConfig, ConfigError> {
    #[derive(Deserialize)]
    struct Echo {
        config_echo: ExperimentConfig,
    }
    serde_json::from_str::<Echo>(text)
        .map(|e| e.config_echo)
        .or_else(|_| serde_json::from_str::<ExperimentConfig>(text))
        .map_err(|e| ConfigError::new(e.line(), format!("invalid JSON config: {e}")))
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "run",
        &[
            "name",
            "strategy",
            "seeds",
            "initial_labeled",
            "query_batch",
            "subset_size",
            "cycles",
            "sequential",
            "retrain_every",
            "baseline",
            "reference",
            "naive_epochs",
            "initial_epochs",
        ],
    ),
    (
        "data",
        &[
            "kind",
            "train_per_class",
            "test_per_class",
            "noise",
            "scale",
            "separation",
            "train_seed",
            "test_seed",
            "dir",
            "pool_size",
            "test_size",
            "sample_seed",
            "center",
        ],
    ),
    ("network", &["hidden", "activation", "beta"]),
    (
        "train",
        &["learning_rate", "epochs", "minibatch_size", "warm_start", "lr_decay"],
    ),
    ("kernel", &["jitter", "cache_row_budget"]),
];

struct Entries {
    map: BTreeMap<(String, String), (usize, String)>,
}

impl Entries {
    fn raw(&self, section: &str, key: &str) -> Option<&(usize, String)> {
        self.map.get(&(section.to_string(), key.to_string()))
    }

    fn get<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|e| ConfigError::new(*line, format!("[{section}] {key} = {v}: {e}"))),
        }
    }

    fn list<T: FromStr>(&self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| ConfigError::new(*line, format!("[{section}] {key}: `{s}`: {e}")))
                })
                .collect(),
        }
    }

    fn line(&self, section: &str, key: &str) -> usize {
        self.raw(section, key).map(|r| r.0).unwrap_or(0)
    }
}

fn tokenize(text: &str) -> Result<Entries, ConfigError> {
    let mut map = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::new(line, format!("malformed section header `{content}`")))?
                .trim();
            if !SECTIONS.iter().any(|(s, _)| *s == name) {
                let valid: Vec<&str> = SECTIONS.iter().map(|(s, _)| *s).collect();
                return Err(ConfigError::new(
                    line,
                    format!("unknown section [{name}]; valid sections: {}", valid.join(", ")),
                ));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| ConfigError::new(line, format!("expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section
            .as_deref()
            .ok_or_else(|| ConfigError::new(line, format!("`{key}` appears before any [section]")))?;
        let keys = SECTIONS.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
        if !keys.contains(&key) {
            return Err(ConfigError::new(
                line,
                format!("unknown key `{key}` in [{sec}]; valid keys: {}", keys.join(", ")),
            ));
        }
        if map
            .insert((sec.to_string(), key.to_string()), (line, value.to_string()))
            .is_some()
        {
            return Err(ConfigError::new(line, format!("duplicate key `{key}` in [{sec}]")));
        }
    }
    Ok(Entries { map })
}

/// Parses the text format. Relative `dir` paths resolve against `base`.
pub fn parse(text: &str, base: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    let e = tokenize(text)?;

    let strategy = match e.raw("run", "strategy") {
        None => Strategy::Mlmoc,
        Some((line, v)) => v.parse::<Strategy>().map_err(|err| ConfigError::new(*line, err.to_string()))?,
    };

    let kind: String = e.get("data", "kind", "spirals".to_string())?;
    let data = match kind.as_str() {
        "spirals" => DataSpec::Spirals {
            train_per_class: e.get("data", "train_per_class", 500)?,
            test_per_class: e.get("data", "test_per_class", 500)?,
            noise: e.get("data", "noise", 0.05)?,
            scale: e.get("data", "scale", 1.0)?,
            train_seed: e.get("data", "train_seed", 0)?,
            test_seed: e.get("data", "test_seed", 1)?,
        },
        "two_gaussians" => DataSpec::TwoGaussians {
            train_per_class: e.get("data", "train_per_class", 500)?,
            test_per_class: e.get("data", "test_per_class", 500)?,
            separation: e.get("data", "separation", 2.0)?,
            train_seed: e.get("data", "train_seed", 0)?,
            test_seed: e.get("data", "test_seed", 1)?,
        },
        "mnist" => {
            let dir: PathBuf = e.get("data", "dir", PathBuf::from("data/mnist"))?;
            let dir = match base {
                Some(b) if dir.is_relative() && !dir.exists() => b.join(dir),
                _ => dir,
            };
            DataSpec::Mnist {
                dir,
                pool_size: e.get("data", "pool_size", 10_000)?,
                test_size: e.get("data", "test_size", 10_000)?,
                sample_seed: e.get("data", "sample_seed", 0)?,
                center: e.get("data", "center", false)?,
            }
        }
        other => {
            return Err(ConfigError::new(
                e.line("data", "kind"),
                format!("unknown data kind `{other}`; valid kinds: spirals, two_gaussians, mnist"),
            ))
        }
    };

    let (n0, classes) = data.shape();
    let hidden: Vec<usize> = e.list("network", "hidden", vec![256])?;
    let activation = match e.raw("network", "activation") {
        None => Activation::Relu,
        Some((line, v)) => v.parse::<Activation>().map_err(|err| ConfigError::new(*line, err.to_string()))?,
    };
    let mut widths = vec![n0];
    widths.extend(&hidden);
    widths.push(classes);
    let mlp = MlpConfig::new(widths, activation).with_beta(e.get("network", "beta", 1.0)?);
    mlp.validate()
        .map_err(|err| ConfigError::new(e.line("network", "hidden"), err.to_string()))?;

    let defaults = TrainConfig::default();
    let train = TrainConfig {
        learning_rate: e.get("train", "learning_rate", defaults.learning_rate)?,
        epochs: e.get("train", "epochs", defaults.epochs)?,
        minibatch_size: e.get("train", "minibatch_size", defaults.minibatch_size)?,
        shuffle_seed: 0,
        warm_start: e.get("train", "warm_start", defaults.warm_start)?,
        lr_decay: e.get("train", "lr_decay", defaults.lr_decay)?,
    };
    train
        .validate()
        .map_err(|err| ConfigError::new(e.line("train", "learning_rate").max(e.line("train", "epochs")), err.to_string()))?;

    let kernel = KernelOptions {
        jitter: JitterPolicy {
            ladder: e.list("kernel", "jitter", JitterPolicy::default().ladder)?,
        },
        cache_row_budget: e.get("kernel", "cache_row_budget", KernelOptions::default().cache_row_budget)?,
    };
    if kernel.jitter.ladder.is_empty() || kernel.jitter.ladder.iter().any(|j| !(*j >= 0.0)) {
        return Err(ConfigError::new(
            e.line("kernel", "jitter"),
            "jitter ladder must be a nonempty list of values >= 0",
        ));
    }

    let baseline = match e.raw("run", "baseline").map(|(l, v)| (*l, v.as_str())) {
        None | Some((_, "linearized")) => ChangeBaseline::Linearized,
        Some((_, "raw")) => ChangeBaseline::Raw,
        Some((line, other)) => {
            return Err(ConfigError::new(
                line,
                format!("unknown baseline `{other}`; valid baselines: linearized, raw"),
            ))
        }
    };
    let reference = match e.raw("run", "reference").map(|(l, v)| (*l, v.as_str())) {
        None | Some((_, "subset")) => ReferenceChoice::Subset,
        Some((line, other)) => match other.strip_prefix("probe:").map(|n| n.trim().parse::<usize>()) {
            Some(Ok(n)) if n > 0 => ReferenceChoice::Probe(n),
            _ => {
                return Err(ConfigError::new(
                    line,
                    format!("reference must be `subset` or `probe:N` with N >= 1, got `{other}`"),
                ))
            }
        },
    };

    let mut run = RunConfig::new(strategy, mlp, train);
    run.initial_labeled = e.get("run", "initial_labeled", run.initial_labeled)?;
    run.query_batch = e.get("run", "query_batch", run.query_batch)?;
    run.subset_size = e.get("run", "subset_size", run.subset_size)?;
    run.cycles = e.get("run", "cycles", run.cycles)?;
    run.sequential = e.get("run", "sequential", run.sequential)?;
    run.retrain_every = e.get("run", "retrain_every", run.retrain_every)?;
    run.naive_epochs = e.get("run", "naive_epochs", run.naive_epochs)?;
    run.initial_epochs = match e.raw("run", "initial_epochs") {
        None => None,
        Some(_) => Some(e.get("run", "initial_epochs", 0)?),
    };
    run.baseline = baseline;
    run.reference = reference;
    run.kernel = kernel;
    run.validate()
        .map_err(|err| ConfigError::new(0, err.to_string()))?;

    let seeds: Vec<u64> = e.list("run", "seeds", vec![0])?;
    if seeds.is_empty() {
        return Err(ConfigError::new(e.line("run", "seeds"), "at least one seed is required"));
    }
    Ok(ExperimentConfig {
        name: e.get("run", "name", strategy.name().to_string())?,
        seeds,
        data,
        run,
    })
}
