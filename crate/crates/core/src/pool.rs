//! Active-learning loops: pool bookkeeping, subset sampling, top-k batch
//! selection, and the batch and sequential query loops.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquire::{
    eer_lin, emoc, entropy_score, margin_score, mlmoc, naive_mlmoc, random_score, AcquisitionResult,
    ChangeBaseline, Distance, Reference, Strategy,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{KernelOptions, KernelState, TangentKernel};
use crate::linalg::Matrix;
use crate::lookahead::{augment_state, predict_lin};
use crate::net::{forward, init, train_sgd, MlpConfig, MlpParams, TrainConfig};

/// Labeled/unlabeled split of a backing dataset, by index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pool {
    size: usize,
    labeled: Vec<usize>,
    /// Kept in ascending order.
    unlabeled: Vec<usize>,
}

impl Pool {
    pub fn new(size: usize, initial_labeled: &[usize]) -> Result<Self> {
        let mut is_labeled = vec![false; size];
        for &i in initial_labeled {
            if i >= size || is_labeled[i] {
                return Err(Error::Contract(format!(
                    "initial labeled index {i} is out of range or repeated"
                )));
            }
            is_labeled[i] = true;
        }
        Ok(Pool {
            size,
            labeled: initial_labeled.to_vec(),
            unlabeled: (0..size).filter(|&i| !is_labeled[i]).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    /// Moves dataset indices from U to L, in the given order.
    pub fn label(&mut self, indices: &[usize]) -> Result<()> {
        for &i in indices {
            let pos = self
                .unlabeled
                .binary_search(&i)
                .map_err(|_| Error::Contract(format!("index {i} is not in the unlabeled pool")))?;
            self.unlabeled.remove(pos);
            self.labeled.push(i);
        }
        Ok(())
    }
}

/// Stream-separated seeds, so every random decision in a run draws from its
/// own generator.
fn stream_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(purpose.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INITIAL: u64 = 1;
const STREAM_SUBSET: u64 = 2;
const STREAM_NETWORK: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_RANDOM_SCORES: u64 = 5;
const STREAM_PROBE: u64 = 6;

/// Uniform sample of `size` unlabeled indices without replacement, ascending.
/// Deterministic in `(pool, seed, cycle)`; saturates to all of U.
pub fn sample_subset(pool: &Pool, size: usize, seed: u64, cycle: usize) -> Vec<usize> {
    sample_stream(pool, size, stream_seed(seed, STREAM_SUBSET, cycle as u64))
}

fn sample_stream(pool: &Pool, size: usize, stream: u64) -> Vec<usize> {
    let u = pool.unlabeled();
    if size >= u.len() {
        return u.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, u.len(), size)
        .into_iter()
        .map(|i| u[i])
        .collect();
    picks.sort_unstable();
    picks
}

/// Positions of the `k` best candidates: highest score first, ties by lowest
/// position, degenerate candidates only once non-degenerate ones run out.
pub fn query_batch_topk(result: &AcquisitionResult, k: usize) -> Result<Vec<usize>> {
    if k > result.len() {
        return Err(Error::Contract(format!(
            "cannot query {k} points from {} candidates",
            result.len()
        )));
    }
    let mut order: Vec<usize> = (0..result.len()).collect();
    order.sort_by(|&a, &b| {
        let da = result.degenerate.get(a).copied().unwrap_or(false);
        let db = result.degenerate.get(b).copied().unwrap_or(false);
        da.cmp(&db)
            .then(result.scores[b].total_cmp(&result.scores[a]))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Where change-based scores are summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "size")]
pub enum ReferenceChoice {
    /// The sampled candidate subset.
    #[default]
    Subset,
    /// A separate random sample of this many unlabeled points.
    Probe(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub initial_labeled: usize,
    /// Points queried per cycle (`k`).
    pub query_batch: usize,
    pub subset_size: usize,
    pub cycles: usize,
    /// Network architecture; `widths[0]` must match the data dimension. The
    /// initialization seed is derived from the run seed.
    pub mlp: MlpConfig,
    /// Per-cycle retraining; also used for the initial fit unless
    /// `initial_epochs` is set.
    pub train: TrainConfig,
    pub initial_epochs: Option<usize>,
    pub sequential: bool,
    /// Sequential mode: retrain with SGD after every this many cycles.
    pub retrain_every: usize,
    pub seed: u64,
    pub baseline: ChangeBaseline,
    pub reference: ReferenceChoice,
    /// Retraining epochs per candidate for the `naive` strategy.
    pub naive_epochs: usize,
    pub kernel: KernelOptions,
}

impl RunConfig {
    pub fn new(strategy: Strategy, mlp: MlpConfig, train: TrainConfig) -> Self {
        RunConfig {
            strategy,
            initial_labeled: 100,
            query_batch: 20,
            subset_size: 4000,
            cycles: 10,
            mlp,
            train,
            initial_epochs: None,
            sequential: false,
            retrain_every: 1,
            seed: 0,
            baseline: ChangeBaseline::Linearized,
            reference: ReferenceChoice::Subset,
            naive_epochs: 15,
            kernel: KernelOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        self.train.validate()?;
        if self.query_batch == 0 || self.subset_size < self.query_batch {
            return Err(Error::Contract(format!(
                "need subset_size >= query_batch >= 1, got subset {} and k {}",
                self.subset_size, self.query_batch
            )));
        }
        if self.cycles == 0 {
            return Err(Error::Contract("cycles must be >= 1".into()));
        }
        if self.initial_labeled == 0 {
            return Err(Error::Contract("initial labeled set must be nonempty".into()));
        }
        if self.retrain_every == 0 {
            return Err(Error::Contract("retrain_every must be >= 1".into()));
        }
        if self.sequential && !self.strategy.uses_kernel() {
            return Err(Error::Contract(format!(
                "sequential mode needs a kernel look-ahead strategy, got {}",
                self.strategy
            )));
        }
        Ok(())
    }
}

/// Measurements of one query cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub labeled_size: usize,
    pub test_accuracy: f64,
    pub query_seconds: f64,
    pub train_seconds: f64,
    pub strategy: String,
    pub seed: u64,
    pub degenerate_skipped: usize,
}

/// Fraction of rows whose output argmax equals the label.
pub fn accuracy(outputs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = (0..outputs.rows())
        .filter(|&r| outputs.argmax_row(r) == labels[r])
        .count();
    hits as f64 / labels.len() as f64
}

pub fn network_accuracy(params: &MlpParams, data: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(2048) {
        let out = forward(params, &data.inputs.select_rows(chunk))?;
        hits += chunk
            .iter()
            .enumerate()
            .filter(|(r, &i)| out.argmax_row(*r) == data.labels[i])
            .count();
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

struct Loop<'a> {
    config: &'a RunConfig,
    train: &'a Dataset,
    pool: Pool,
    params: MlpParams,
}

impl<'a> Loop<'a> {
    fn start(config: &'a RunConfig, train: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if config.mlp.input_dim() != train.dim() || config.mlp.output_dim() != train.classes {
            return Err(Error::Contract(format!(
                "network widths {:?} do not fit data with dimension {} and {} classes",
                config.mlp.widths,
                train.dim(),
                train.classes
            )));
        }
        let needed = config.initial_labeled + config.cycles * config.query_batch;
        if needed > train.len() {
            return Err(Error::Contract(format!(
                "pool of {} points cannot supply {needed} labels",
                train.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, STREAM_INITIAL, 0));
        let initial = rand::seq::index::sample(&mut rng, train.len(), config.initial_labeled).into_vec();
        let pool = Pool::new(train.len(), &initial)?;
        let mlp = config
            .mlp
            .clone()
            .with_seed(stream_seed(config.seed, STREAM_NETWORK, config.mlp.seed));
        let params = init(&mlp)?;
        let mut lp = Loop {
            config,
            train,
            pool,
            params,
        };
        let epochs = config.initial_epochs.unwrap_or(config.train.epochs);
        lp.retrain(0, epochs, true)?;
        Ok(lp)
    }

    fn labeled(&self) -> (Matrix, Matrix) {
        let idx = self.pool.labeled();
        (
            self.train.inputs.select_rows(idx),
            self.train.one_hot.select_rows(idx),
        )
    }

    fn retrain(&mut self, cycle: usize, epochs: usize, warm: bool) -> Result<f64> {
        let t0 = Instant::now();
        let (x, y) = self.labeled();
        let cfg = TrainConfig {
            epochs,
            shuffle_seed: stream_seed(self.config.seed, STREAM_SHUFFLE, cycle as u64),
            warm_start: warm,
            ..self.config.train.clone()
        };
        self.params = train_sgd(&self.params, &x, &y, &cfg).map_err(|e| e.in_cycle(cycle))?;
        Ok(t0.elapsed().as_secs_f64())
    }

    fn build_state(&self) -> Result<KernelState> {
        let kernel = match self.config.strategy {
            Strategy::MlmocInf => TangentKernel::Infinite {
                config: self.params.config().clone(),
            },
            _ => TangentKernel::empirical(self.params.clone()),
        };
        let (x, y) = self.labeled();
        KernelState::build(kernel, &self.params, x, y, self.config.kernel.clone())
    }

    fn reference_rows(&self, cycle: usize, step: usize) -> Option<Matrix> {
        match self.config.reference {
            ReferenceChoice::Subset => None,
            ReferenceChoice::Probe(size) => {
                let stream = stream_seed(
                    self.config.seed,
                    STREAM_PROBE,
                    (cycle as u64) << 32 | step as u64,
                );
                let idx = sample_stream(&self.pool, size, stream);
                Some(self.train.inputs.select_rows(&idx))
            }
        }
    }

    fn score(
        &self,
        state: Option<&KernelState>,
        candidates: &Matrix,
        reference: Option<&Matrix>,
        cycle: usize,
    ) -> Result<AcquisitionResult> {
        let reference_arg = match reference {
            Some(r) => Reference::Rows(r),
            None => Reference::Candidates,
        };
        let reference_rows = reference.unwrap_or(candidates);
        let cfg = self.config;
        match cfg.strategy {
            Strategy::Mlmoc | Strategy::MlmocInf | Strategy::MlmocRaw | Strategy::Emoc | Strategy::Eer => {
                let owned;
                let state = match state {
                    Some(s) => s,
                    None => {
                        owned = self.build_state()?;
                        &owned
                    }
                };
                match cfg.strategy {
                    Strategy::MlmocRaw => mlmoc(state, candidates, reference_arg, ChangeBaseline::Raw),
                    Strategy::Emoc => emoc(state, candidates, reference_arg, cfg.baseline, Distance::L2),
                    Strategy::Eer => eer_lin(state, candidates, reference_arg),
                    _ => mlmoc(state, candidates, reference_arg, cfg.baseline),
                }
            }
            Strategy::Entropy => entropy_score(&forward(&self.params, candidates)?),
            Strategy::Margin => margin_score(&forward(&self.params, candidates)?),
            Strategy::Random => random_score(
                candidates.rows(),
                stream_seed(cfg.seed, STREAM_RANDOM_SCORES, cycle as u64),
            ),
            Strategy::Naive | Strategy::OneStep => {
                let (x, y) = self.labeled();
                let retrain = if cfg.strategy == Strategy::Naive {
                    TrainConfig {
                        epochs: cfg.naive_epochs,
                        shuffle_seed: stream_seed(cfg.seed, STREAM_SHUFFLE, cycle as u64),
                        ..cfg.train.clone()
                    }
                } else {
                    TrainConfig {
                        epochs: 1,
                        minibatch_size: x.rows() + 1,
                        ..cfg.train.clone()
                    }
                };
                naive_mlmoc(&self.params, &x, &y, candidates, reference_rows, &retrain)
            }
        }
    }

    fn record(&self, cycle: usize, acc: f64, query: f64, train: f64, degenerate: usize) -> CycleRecord {
        CycleRecord {
            cycle,
            labeled_size: self.pool.labeled().len(),
            test_accuracy: acc,
            query_seconds: query,
            train_seconds: train,
            strategy: self.config.strategy.name().to_string(),
            seed: self.config.seed,
            degenerate_skipped: degenerate,
        }
    }
}

/// Batch active learning: per cycle, score a fresh random subset, label the
/// top `k`, then retrain with SGD.
pub fn run_batch_al(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Vec<CycleRecord>> {
    let mut lp = Loop::start(config, train)?;
    let mut records = Vec::with_capacity(config.cycles);
    for cycle in 1..=config.cycles {
        let t0 = Instant::now();
        let subset = sample_subset(&lp.pool, config.subset_size, config.seed, cycle);
        let candidates = train.inputs.select_rows(&subset);
        let reference = lp.reference_rows(cycle, 0);
        let result = lp
            .score(None, &candidates, reference.as_ref(), cycle)
            .map_err(|e| e.in_cycle(cycle))?;
        let picks: Vec<usize> = query_batch_topk(&result, config.query_batch)?
            .into_iter()
            .map(|p| subset[p])
            .collect();
        lp.pool.label(&picks)?;
        let query = t0.elapsed().as_secs_f64();

        let train_s = lp.retrain(cycle, config.train.epochs, config.train.warm_start)?;
        let acc = network_accuracy(&lp.params, test)?;
        records.push(lp.record(cycle, acc, query, train_s, result.degenerate_count()));
    }
    Ok(records)
}

/// Sequential active learning: within a cycle each true label is folded into
/// the kernel state before the next query; SGD runs every `retrain_every`
/// cycles. Accuracy after a cycle without retraining uses the linearized
/// model of the augmented state.
pub fn run_sequential_al(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Vec<CycleRecord>> {
    if !config.sequential {
        return Err(Error::Contract("run_sequential_al needs sequential = true".into()));
    }
    let (records, _) = sequential_loop(config, train, test)?;
    Ok(records)
}

/// [`run_sequential_al`] that also returns the final kernel state, if the last
/// cycle did not retrain.
pub fn sequential_loop(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Vec<CycleRecord>, Option<KernelState>)> {
    let mut lp = Loop::start(config, train)?;
    let mut records = Vec::with_capacity(config.cycles);
    let mut state: Option<KernelState> = None;
    for cycle in 1..=config.cycles {
        let t0 = Instant::now();
        let mut current = match state.take() {
            Some(s) => s,
            None => lp.build_state().map_err(|e| e.in_cycle(cycle))?,
        };
        let mut remaining = sample_subset(&lp.pool, config.subset_size, config.seed, cycle);
        let mut degenerate = 0;
        for step in 0..config.query_batch {
            let candidates = train.inputs.select_rows(&remaining);
            let reference = lp.reference_rows(cycle, step);
            let result = lp
                .score(Some(&current), &candidates, reference.as_ref(), cycle)
                .map_err(|e| e.in_cycle(cycle))?;
            degenerate += result.degenerate_count();
            let pos = query_batch_topk(&result, 1)?[0];
            let idx = remaining.remove(pos);
            let x = train.inputs.row(idx);
            let y = train.one_hot.row(idx);
            let f_val = current.network_outputs(&Matrix::row_vector(x))?.into_vec();
            lp.pool.label(&[idx])?;
            current = match augment_state(&current, x, y, &f_val) {
                Ok(s) => s,
                // a candidate inside the labeled span cannot border the
                // factor; refactorize with the jitter ladder instead
                Err(e) if e.is_degenerate() || matches!(e, Error::NotPositiveDefinite { .. }) => {
                    lp.build_state().map_err(|e| e.in_cycle(cycle))?
                }
                Err(e) => return Err(e.in_cycle(cycle)),
            };
        }
        let query = t0.elapsed().as_secs_f64();

        let (acc, train_s) = if cycle % config.retrain_every == 0 {
            let train_s = lp.retrain(cycle, config.train.epochs, config.train.warm_start)?;
            (network_accuracy(&lp.params, test)?, train_s)
        } else {
            let pred = predict_lin(&current, &test.inputs)?;
            state = Some(current);
            (accuracy(&pred, &test.labels), 0.0)
        };
        records.push(lp.record(cycle, acc, query, train_s, degenerate));
    }
    Ok((records, state))
}

/// Dispatches on `config.sequential`.
pub fn run_al(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Vec<CycleRecord>> {
    if config.sequential {
        run_sequential_al(config, train, test)
    } else {
        run_batch_al(config, train, test)
    }
}
