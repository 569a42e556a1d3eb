//! Wall-time comparisons of the block look-ahead against direct alternatives.

use std::time::Instant;

use ntkal::acquire::{mlmoc, naive_mlmoc, ChangeBaseline, Reference};
use ntkal::data::gen_spirals;
use ntkal::kernel::{KernelOptions, KernelState, TangentKernel};
use ntkal::linalg::{chol_solve, cholesky, matmul, Matrix};
use ntkal::net::{init, train_sgd, Activation, MlpConfig, MlpParams, TrainConfig};
use ntkal::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::CliError;

/// Largest kernel block (in f64 entries) a benchmark may allocate.
pub const MAX_KERNEL_ENTRIES: usize = 1 << 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    BlockVsDirect,
    KernelVsSgd,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchParams {
    pub labeled: usize,
    pub candidates: usize,
    pub width: usize,
    pub epochs: usize,
    pub reps: usize,
    pub seed: u64,
}

impl BenchParams {
    pub fn new(labeled: usize, candidates: usize) -> Self {
        BenchParams {
            labeled,
            candidates,
            width: 256,
            epochs: 15,
            reps: 5,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), Error> {
        if self.reps < 1 {
            return Err(Error::Contract("repetition count must be >= 1".into()));
        }
        if self.labeled == 0 || self.candidates == 0 || self.width == 0 {
            return Err(Error::Contract("labeled, candidate and width sizes must be >= 1".into()));
        }
        let n = self.labeled + self.candidates;
        if n.saturating_mul(n) > MAX_KERNEL_ENTRIES {
            return Err(Error::Contract(format!(
                "{n} points exceed the benchmark memory budget of {MAX_KERNEL_ENTRIES} kernel entries"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub params: BenchParams,
    /// Look-ahead path.
    pub fast_seconds: Vec<f64>,
    /// Reference path.
    pub slow_seconds: Vec<f64>,
    pub fast_median: f64,
    pub slow_median: f64,
    pub speedup: f64,
    /// Largest relative score difference between the two paths, when both
    /// compute the same scores.
    pub max_score_rel_diff: Option<f64>,
}

impl BenchReport {
    pub fn line(&self) -> String {
        let (fast, slow) = match self.mode {
            BenchMode::BlockVsDirect => ("block", "direct"),
            BenchMode::KernelVsSgd => ("kernel", "sgd"),
        };
        format!(
            "{fast} median {:.6}s, {slow} median {:.6}s, speedup {:.1}x (L={}, U={}, reps={})",
            self.fast_median, self.slow_median, self.speedup, self.params.labeled, self.params.candidates, self.params.reps
        )
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T, Error>) -> Result<(T, f64), Error> {
    let t0 = Instant::now();
    let out = f()?;
    Ok((out, t0.elapsed().as_secs_f64()))
}

fn uniform_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// MLMOC scores by refactorizing the bordered kernel for every candidate.
pub fn direct_mlmoc(state: &KernelState, candidates: &Matrix) -> Result<Vec<f64>, Error> {
    let pc = state.prepare(candidates)?;
    let k_cx = state.cross_prepared(&pc)?;
    let k_cc = state.kernel().between(&pc, &pc)?;
    let f_c = state.network_outputs(candidates)?;
    let baseline = {
        let mut b = f_c.clone();
        b.add_assign(&matmul(&k_cx, state.solved_residual())?)?;
        b
    };
    let l = state.len();
    let classes = state.classes();
    let policy = state.options().jitter.clone();
    (0..candidates.rows())
        .into_par_iter()
        .map(|j| {
            let mut gram = Matrix::zeros(l + 1, l + 1);
            for i in 0..l {
                gram.row_mut(i)[..l].copy_from_slice(state.gram().row(i));
                gram.as_mut_slice()[i * (l + 1) + l] = k_cx[(j, i)];
            }
            gram.row_mut(l)[..l].copy_from_slice(k_cx.row(j));
            gram.as_mut_slice()[l * (l + 1) + l] = k_cc[(j, j)];
            let factor = cholesky(&gram, &policy)?;
            let label = f_c.argmax_row(j);
            let mut residual = state.residual().clone();
            let r_new: Vec<f64> = (0..classes)
                .map(|c| if c == label { 1.0 } else { 0.0 } - f_c[(j, c)])
                .collect();
            residual.push_row(&r_new)?;
            let w = chol_solve(&factor, &residual)?;
            let mut score = 0.0;
            for q in 0..candidates.rows() {
                let mut diff2 = 0.0;
                for c in 0..classes {
                    let mut after = f_c[(q, c)] + k_cc[(q, j)] * w[(l, c)];
                    after += (0..l).map(|i| k_cx[(q, i)] * w[(i, c)]).sum::<f64>();
                    let d = baseline[(q, c)] - after;
                    diff2 += d * d;
                }
                score += diff2.sqrt();
            }
            Ok(score)
        })
        .collect()
}

/// Block formula with one cached factorization vs a fresh factorization of
/// the bordered kernel per candidate, on random inputs.
pub fn block_vs_direct(params: &BenchParams) -> Result<BenchReport, Error> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dim = 16;
    let net = init(&MlpConfig::new(vec![dim, params.width, 2], Activation::Relu).with_seed(params.seed))?;
    let x = uniform_rows(params.labeled, dim, &mut rng);
    let mut y = Matrix::zeros(params.labeled, 2);
    for r in 0..params.labeled {
        y.as_mut_slice()[r * 2 + rng.gen_range(0..2)] = 1.0;
    }
    let state = KernelState::build(TangentKernel::empirical(net.clone()), &net, x, y, KernelOptions::default())?;
    let cands = uniform_rows(params.candidates, dim, &mut rng);

    let mut fast = Vec::new();
    let mut slow = Vec::new();
    let mut worst = 0.0f64;
    for _ in 0..params.reps {
        let (block, tf) = timed(|| mlmoc(&state, &cands, Reference::Candidates, ChangeBaseline::Linearized))?;
        let (direct, ts) = timed(|| direct_mlmoc(&state, &cands))?;
        for (a, b) in block.scores.iter().zip(&direct) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        }
        fast.push(tf);
        slow.push(ts);
    }
    Ok(report(BenchMode::BlockVsDirect, params, fast, slow, Some(worst)))
}

/// MLMOC through the kernel state vs MLMOC with real SGD retraining for
/// every candidate, on the spirals data.
pub fn kernel_vs_sgd(params: &BenchParams) -> Result<BenchReport, Error> {
    params.validate()?;
    let data = gen_spirals(params.labeled + params.candidates, 0.05, params.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let idx = rand::seq::index::sample(&mut rng, data.len(), params.labeled + params.candidates).into_vec();
    let lab = data.subset(&idx[..params.labeled]);
    let cands = data.inputs.select_rows(&idx[params.labeled..]);
    let cfg = MlpConfig::new(vec![2, params.width, 2], Activation::Relu).with_seed(params.seed);
    let fit = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let net: MlpParams = train_sgd(&init(&cfg)?, &lab.inputs, &lab.one_hot, &fit)?;
    let retrain = TrainConfig {
        epochs: params.epochs,
        ..TrainConfig::default()
    };

    let mut fast = Vec::new();
    let mut slow = Vec::new();
    for _ in 0..params.reps {
        let (_, tf) = timed(|| {
            let state = KernelState::build(
                TangentKernel::empirical(net.clone()),
                &net,
                lab.inputs.clone(),
                lab.one_hot.clone(),
                KernelOptions::default(),
            )?;
            mlmoc(&state, &cands, Reference::Candidates, ChangeBaseline::Linearized)
        })?;
        let (_, ts) = timed(|| naive_mlmoc(&net, &lab.inputs, &lab.one_hot, &cands, &cands, &retrain))?;
        fast.push(tf);
        slow.push(ts);
    }
    Ok(report(BenchMode::KernelVsSgd, params, fast, slow, None))
}

fn report(mode: BenchMode, params: &BenchParams, fast: Vec<f64>, slow: Vec<f64>, diff: Option<f64>) -> BenchReport {
    let fast_median = median(&fast);
    let slow_median = median(&slow);
    BenchReport {
        mode,
        params: params.clone(),
        fast_seconds: fast,
        slow_seconds: slow,
        fast_median,
        slow_median,
        speedup: slow_median / fast_median,
        max_score_rel_diff: diff,
    }
}

pub fn cmd_bench(mode: BenchMode, params: &BenchParams) -> Result<BenchReport, CliError> {
    let r = match mode {
        BenchMode::BlockVsDirect => block_vs_direct(params)?,
        BenchMode::KernelVsSgd => kernel_vs_sgd(params)?,
    };
    Ok(r)
}
