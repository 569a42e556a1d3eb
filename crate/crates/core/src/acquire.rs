//! Acquisition functions.
//!
//! Look-ahead scores (MLMOC, EMOC, EER) are computed for all candidates at
//! once: with `K_CX = Θ(C, X)` the per-candidate solves `v_j` form
//! `V = Θ(X,X)⁻¹ K_CXᵀ`, and the change of the linearized model at
//! reference point `q` after adding candidate `j` with label `y` is the rank-one
//! term `A[j, q] · (V_jᵀR − y + f_L(x_j)) / u_j` where
//! `A = Vᵀ K_QXᵀ − Θ(C, Q)`.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelState;
use crate::linalg::{argmax, chol_solve, dot, matmul, matmul_nt, Matrix};
use crate::lookahead::degenerate_threshold;
use crate::net::{forward, train_sgd, MlpParams, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionResult {
    /// One score per candidate row.
    pub scores: Vec<f64>,
    /// One-hot pseudo-labels (`f_L` argmax) per candidate; zero columns for
    /// strategies that do not use them.
    pub pseudo_labels: Matrix,
    pub argmax_index: usize,
    pub degenerate: Vec<bool>,
}

impl AcquisitionResult {
    pub fn new(scores: Vec<f64>, pseudo_labels: Matrix, degenerate: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("candidate set"));
        }
        let argmax_index = argmax(&scores);
        Ok(AcquisitionResult {
            scores,
            pseudo_labels,
            argmax_index,
            degenerate,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

/// What the look-ahead prediction is compared against in change-based scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeBaseline {
    /// The current linearized prediction; a no-op augmentation scores 0.
    #[default]
    Linearized,
    /// The raw network output `f_L`.
    Raw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    L2,
    L1,
}

impl Distance {
    fn of(self, v: &[f64]) -> f64 {
        match self {
            Distance::L2 => dot(v, v).sqrt(),
            Distance::L1 => v.iter().map(|x| x.abs()).sum(),
        }
    }
}

/// Points the model change is summed over.
#[derive(Clone, Copy, Debug)]
pub enum Reference<'a> {
    /// The candidate rows themselves.
    Candidates,
    Rows(&'a Matrix),
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn one_hot_argmax(outputs: &Matrix) -> Matrix {
    let mut m = Matrix::zeros(outputs.rows(), outputs.cols());
    for r in 0..outputs.rows() {
        m[(r, outputs.argmax_row(r))] = 1.0;
    }
    m
}

/// Shared pieces for scoring every candidate against every reference point.
pub struct LookaheadBatch {
    /// `f_L` at the candidates.
    pub candidate_outputs: Matrix,
    /// `Vᵀ R`, `m × C`.
    pub vt_residual: Matrix,
    /// Effective Schur complements (jitter included).
    pub schur: Vec<f64>,
    pub degenerate: Vec<bool>,
    /// `A`, `m × |Q|`.
    pub change_dirs: Matrix,
    /// Current linearized prediction at the reference points.
    pub reference_lin: Matrix,
    /// Network outputs at the reference points.
    pub reference_raw: Matrix,
}

impl LookaheadBatch {
    pub fn new(state: &KernelState, candidates: &Matrix, reference: Reference<'_>) -> Result<Self> {
        if candidates.rows() == 0 {
            return Err(Error::EmptyInput("candidate set"));
        }
        let kernel = state.kernel();
        let pc = state.prepare(candidates)?;
        let k_cx = state.cross_prepared(&pc)?;
        let diag = kernel.diag(&pc)?;
        let v = chol_solve(state.factor(), &k_cx.transpose())?;
        let vt = v.transpose();
        let vt_residual = matmul(&vt, state.residual())?;
        let jitter = state.factor().jitter_applied();
        let mut schur = Vec::with_capacity(candidates.rows());
        let mut degenerate = Vec::with_capacity(candidates.rows());
        for j in 0..candidates.rows() {
            let raw = diag[j] - dot(k_cx.row(j), vt.row(j));
            degenerate.push(!(raw > degenerate_threshold(state, diag[j])));
            schur.push(raw + jitter);
        }
        let candidate_outputs = forward(state.network(), candidates)?;

        let (k_qx, k_cq, q_raw) = match reference {
            Reference::Candidates => {
                let k_cc = kernel.between(&pc, &pc)?;
                (k_cx, k_cc, candidate_outputs.clone())
            }
            Reference::Rows(q) => {
                if q.rows() == 0 {
                    return Err(Error::EmptyInput("reference set"));
                }
                let pq = state.prepare(q)?;
                let k_qx = state.cross_prepared(&pq)?;
                let k_cq = kernel.between(&pc, &pq)?;
                (k_qx, k_cq, forward(state.network(), q)?)
            }
        };
        let mut change_dirs = matmul_nt(&vt, &k_qx)?;
        for (a, k) in change_dirs.as_mut_slice().iter_mut().zip(k_cq.as_slice()) {
            *a -= k;
        }
        let mut reference_lin = q_raw.clone();
        reference_lin.add_assign(&matmul(&k_qx, state.solved_residual())?)?;
        Ok(LookaheadBatch {
            candidate_outputs,
            vt_residual,
            schur,
            degenerate,
            change_dirs,
            reference_lin,
            reference_raw: q_raw,
        })
    }

    pub fn candidates(&self) -> usize {
        self.schur.len()
    }

    pub fn classes(&self) -> usize {
        self.vt_residual.cols()
    }

    /// `V_jᵀR − (y − f_L(x_j))`.
    pub fn coefficient(&self, j: usize, label: usize) -> Vec<f64> {
        let f = self.candidate_outputs.row(j);
        self.vt_residual
            .row(j)
            .iter()
            .enumerate()
            .map(|(c, &vr)| {
                let y = if c == label { 1.0 } else { 0.0 };
                vr - (y - f[c])
            })
            .collect()
    }

    /// `Σ_q D(baseline(q), f⁺(q))` for candidate `j` with the given label.
    pub fn change_score(&self, j: usize, label: usize, baseline: ChangeBaseline, distance: Distance) -> f64 {
        let coef = self.coefficient(j, label);
        let u = self.schur[j];
        let dirs = self.change_dirs.row(j);
        match baseline {
            ChangeBaseline::Linearized => {
                let abs_sum: f64 = dirs.iter().map(|a| a.abs()).sum();
                distance.of(&coef) * abs_sum / u
            }
            ChangeBaseline::Raw => {
                let mut diff = vec![0.0; coef.len()];
                let mut total = 0.0;
                for (q, &a) in dirs.iter().enumerate() {
                    let lin = self.reference_lin.row(q);
                    let raw = self.reference_raw.row(q);
                    for c in 0..coef.len() {
                        diff[c] = raw[c] - (lin[c] + a * coef[c] / u);
                    }
                    total += distance.of(&diff);
                }
                total
            }
        }
    }

    /// Look-ahead predictions at every reference point for candidate `j`.
    pub fn lookahead_outputs(&self, j: usize, label: usize) -> Matrix {
        let coef = self.coefficient(j, label);
        let u = self.schur[j];
        let mut out = self.reference_lin.clone();
        for (q, &a) in self.change_dirs.row(j).iter().enumerate() {
            for (o, c) in out.row_mut(q).iter_mut().zip(&coef) {
                *o += a * c / u;
            }
        }
        out
    }
}

fn score_candidates(m: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> Vec<f64> {
    (0..m).into_par_iter().map(f).collect()
}

/// Most Likely Model Output Change.
pub fn mlmoc(
    state: &KernelState,
    candidates: &Matrix,
    reference: Reference<'_>,
    baseline: ChangeBaseline,
) -> Result<AcquisitionResult> {
    let batch = LookaheadBatch::new(state, candidates, reference)?;
    mlmoc_from_batch(&batch, baseline)
}

pub fn mlmoc_from_batch(batch: &LookaheadBatch, baseline: ChangeBaseline) -> Result<AcquisitionResult> {
    let pseudo = one_hot_argmax(&batch.candidate_outputs);
    let scores = score_candidates(batch.candidates(), |j| {
        if batch.degenerate[j] {
            0.0
        } else {
            let label = batch.candidate_outputs.argmax_row(j);
            batch.change_score(j, label, baseline, Distance::L2)
        }
    });
    AcquisitionResult::new(scores, pseudo, batch.degenerate.clone())
}

/// Expected Model Output Change, weighting every label by `softmax(f_L(x'))`.
pub fn emoc(
    state: &KernelState,
    candidates: &Matrix,
    reference: Reference<'_>,
    baseline: ChangeBaseline,
    distance: Distance,
) -> Result<AcquisitionResult> {
    let batch = LookaheadBatch::new(state, candidates, reference)?;
    let pseudo = one_hot_argmax(&batch.candidate_outputs);
    let scores = score_candidates(batch.candidates(), |j| {
        if batch.degenerate[j] {
            return 0.0;
        }
        let p = softmax(batch.candidate_outputs.row(j));
        p.iter()
            .enumerate()
            .map(|(y, &py)| py * batch.change_score(j, y, baseline, distance))
            .sum()
    });
    AcquisitionResult::new(scores, pseudo, batch.degenerate.clone())
}

/// Expected Error Reduction on the linearized look-ahead: the negated
/// expected sum of predictive entropies over the reference set.
pub fn eer_lin(state: &KernelState, candidates: &Matrix, reference: Reference<'_>) -> Result<AcquisitionResult> {
    let batch = LookaheadBatch::new(state, candidates, reference)?;
    let pseudo = one_hot_argmax(&batch.candidate_outputs);
    let entropy_sum = |m: &Matrix| -> f64 { m.row_iter().map(|r| entropy(&softmax(r))).sum() };
    let unchanged = -entropy_sum(&batch.reference_lin);
    let scores = score_candidates(batch.candidates(), |j| {
        if batch.degenerate[j] {
            return unchanged;
        }
        let p = softmax(batch.candidate_outputs.row(j));
        -p.iter()
            .enumerate()
            .map(|(y, &py)| py * entropy_sum(&batch.lookahead_outputs(j, y)))
            .sum::<f64>()
    });
    AcquisitionResult::new(scores, pseudo, batch.degenerate.clone())
}

/// Predictive entropy of `softmax(f_L(x))`.
pub fn entropy_score(outputs: &Matrix) -> Result<AcquisitionResult> {
    let scores = outputs.row_iter().map(|r| entropy(&softmax(r))).collect();
    AcquisitionResult::new(scores, one_hot_argmax(outputs), vec![false; outputs.rows()])
}

/// Negative gap between the two largest softmax probabilities.
pub fn margin_score(outputs: &Matrix) -> Result<AcquisitionResult> {
    let scores = outputs
        .row_iter()
        .map(|r| {
            let mut p = softmax(r);
            p.sort_by(|a, b| b.total_cmp(a));
            let second = p.get(1).copied().unwrap_or(0.0);
            -(p[0] - second)
        })
        .collect();
    AcquisitionResult::new(scores, one_hot_argmax(outputs), vec![false; outputs.rows()])
}

/// Seeded uniform scores.
pub fn random_score(count: usize, seed: u64) -> Result<AcquisitionResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..count).map(|_| rng.gen::<f64>()).collect();
    AcquisitionResult::new(scores, Matrix::zeros(count, 0), vec![false; count])
}

/// Outputs on `reference` after warm-start SGD retraining on `L ∪ {(x', y')}`.
pub fn naive_sgd_oracle(
    params: &MlpParams,
    labeled_inputs: &Matrix,
    labeled_targets: &Matrix,
    candidate: (&[f64], &[f64]),
    cfg: &TrainConfig,
    reference: &Matrix,
) -> Result<Matrix> {
    if cfg.epochs == 0 {
        return forward(params, reference);
    }
    let inputs = labeled_inputs.vstack(&Matrix::row_vector(candidate.0))?;
    let targets = labeled_targets.vstack(&Matrix::row_vector(candidate.1))?;
    let cfg = TrainConfig {
        warm_start: true,
        ..cfg.clone()
    };
    let retrained = train_sgd(params, &inputs, &targets, &cfg)?;
    forward(&retrained, reference)
}

/// MLMOC with real SGD retraining per candidate.
pub fn naive_mlmoc(
    params: &MlpParams,
    labeled_inputs: &Matrix,
    labeled_targets: &Matrix,
    candidates: &Matrix,
    reference: &Matrix,
    cfg: &TrainConfig,
) -> Result<AcquisitionResult> {
    if candidates.rows() == 0 {
        return Err(Error::EmptyInput("candidate set"));
    }
    let current = forward(params, reference)?;
    let cand_out = forward(params, candidates)?;
    let pseudo = one_hot_argmax(&cand_out);
    let scores = (0..candidates.rows())
        .map(|j| {
            let after = naive_sgd_oracle(
                params,
                labeled_inputs,
                labeled_targets,
                (candidates.row(j), pseudo.row(j)),
                cfg,
                reference,
            )?;
            let diff = current.sub(&after)?;
            Ok(diff.row_iter().map(|r| dot(r, r).sqrt()).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    AcquisitionResult::new(scores, pseudo, vec![false; candidates.rows()])
}

/// Acquisition strategies selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mlmoc,
    /// MLMOC scored against raw network outputs instead of the linearized model.
    MlmocRaw,
    /// MLMOC on the analytic infinite-width kernel.
    MlmocInf,
    Emoc,
    Eer,
    Entropy,
    Margin,
    Random,
    /// MLMOC with per-candidate SGD retraining.
    Naive,
    /// MLMOC with one full-batch gradient step per candidate.
    OneStep,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::Mlmoc,
        Strategy::MlmocRaw,
        Strategy::MlmocInf,
        Strategy::Emoc,
        Strategy::Eer,
        Strategy::Entropy,
        Strategy::Margin,
        Strategy::Random,
        Strategy::Naive,
        Strategy::OneStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mlmoc => "mlmoc",
            Strategy::MlmocRaw => "mlmoc_raw",
            Strategy::MlmocInf => "mlmoc_inf",
            Strategy::Emoc => "emoc",
            Strategy::Eer => "eer",
            Strategy::Entropy => "entropy",
            Strategy::Margin => "margin",
            Strategy::Random => "random",
            Strategy::Naive => "naive",
            Strategy::OneStep => "one_step",
        }
    }

    /// Whether scoring needs a kernel state.
    pub fn uses_kernel(self) -> bool {
        matches!(
            self,
            Strategy::Mlmoc | Strategy::MlmocRaw | Strategy::MlmocInf | Strategy::Emoc | Strategy::Eer
        )
    }

    pub fn valid_names() -> String {
        Strategy::ALL.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Format(format!(
                    "unknown strategy {s:?}; valid strategies: {}",
                    Strategy::valid_names()
                ))
            })
    }
}
