//! Linearized-network predictions and their one-point look-ahead.
//!
//! With `R = Y − f_L(X)` and `W = Θ(X,X)⁻¹R` the converged linearized model is
//! `f_L(q) + Θ(q,X) W`. Adding a candidate `(x', y')` borders the kernel with
//! one row and column; writing `v = Θ(X,X)⁻¹Θ(X,x')` and the Schur complement
//! `u = Θ(x',x') − Θ(x',X) v`, the augmented prediction is
//!
//! ```text
//! f⁺(q) = f_lin(q) + (Θ(q,X) v − Θ(q,x')) (vᵀR − r') / u,   r' = y' − f_L(x')
//! ```
//!
//! so one factorization of `Θ(X,X)` serves every candidate.

use crate::error::{Error, Result};
use crate::kernel::{KernelState, Prepared};
use crate::linalg::{chol_solve, dot, matmul, sym_eig, Matrix};

/// Candidates whose Schur complement falls to `DEGENERATE_RELATIVE · Θ(x',x')`
/// (plus the state's jitter) lie numerically inside the labeled span.
pub const DEGENERATE_RELATIVE: f64 = 1e-10;

/// Per-candidate quantities of the bordered kernel.
#[derive(Clone, Debug)]
pub struct CandidateContext {
    pub input: Vec<f64>,
    pub pseudo_label: Vec<f64>,
    /// `f_L(x')`.
    pub network_output: Vec<f64>,
    /// `Θ(X, x')`.
    pub cross: Vec<f64>,
    /// `Θ(x', x')`.
    pub self_kernel: f64,
    /// `Θ(X,X)⁻¹ Θ(X, x')` (with the state's jitter).
    pub v: Vec<f64>,
    /// Schur complement of the bordered kernel, including the state's jitter
    /// on the new diagonal entry.
    pub schur: f64,
    /// `y' − f_L(x')`.
    pub residual: Vec<f64>,
    /// `vᵀR − r'`.
    pub coefficient: Vec<f64>,
}

/// Returns the degeneracy threshold for a candidate with the given self-kernel.
pub fn degenerate_threshold(state: &KernelState, self_kernel: f64) -> f64 {
    DEGENERATE_RELATIVE * self_kernel.abs() + state.factor().jitter_applied()
}

/// `f_L(q) + Θ(q, X) W`.
pub fn predict_lin(state: &KernelState, q: &Matrix) -> Result<Matrix> {
    let cross = state.cross_kernel(q)?;
    predict_lin_with(state, q, &cross)
}

/// [`predict_lin`] with a precomputed `Θ(q, X)`.
pub fn predict_lin_with(state: &KernelState, q: &Matrix, cross: &Matrix) -> Result<Matrix> {
    let mut out = state.network_outputs(q)?;
    let correction = matmul(cross, state.solved_residual())?;
    out.add_assign(&correction)?;
    Ok(out)
}

/// Linearized prediction after training for time `t` with gradient flow:
/// `f_L(q) + Θ(q,X) Θ⁻¹ (I − e^{−tΘ}) R`, through an eigendecomposition of
/// the (jittered) gram.
pub fn predict_lin_at_time(state: &KernelState, q: &Matrix, t: f64) -> Result<Matrix> {
    if !(t >= 0.0) {
        return Err(Error::Contract(format!("time must be >= 0, got {t}")));
    }
    let mut gram = state.gram().clone();
    let jitter = state.factor().jitter_applied();
    for i in 0..gram.rows() {
        gram[(i, i)] += jitter;
    }
    let eig = sym_eig(&gram)?;
    let gains: Vec<f64> = eig
        .values
        .iter()
        .map(|&lam| {
            let lam = lam.max(0.0);
            if t == 0.0 {
                0.0
            } else if lam * t < 1e-12 {
                t
            } else {
                -(-t * lam).exp_m1() / lam
            }
        })
        .collect();
    // V diag(g) Vᵀ R
    let vt_r = matmul(&eig.vectors.transpose(), state.residual())?;
    let scaled = Matrix::from_fn(vt_r.rows(), vt_r.cols(), |i, j| gains[i] * vt_r[(i, j)]);
    let coef = matmul(&eig.vectors, &scaled)?;
    let cross = state.cross_kernel(q)?;
    let mut out = state.network_outputs(q)?;
    out.add_assign(&matmul(&cross, &coef)?)?;
    Ok(out)
}

/// Builds the context from explicit kernel values.
pub fn prepare_candidate_with(
    state: &KernelState,
    x: &[f64],
    y: &[f64],
    network_output: &[f64],
    cross: Vec<f64>,
    self_kernel: f64,
) -> Result<CandidateContext> {
    if cross.len() != state.len() {
        return Err(Error::shape("prepare_candidate", (cross.len(), 1), (state.len(), 1)));
    }
    if y.len() != state.classes() || network_output.len() != state.classes() {
        return Err(Error::shape(
            "prepare_candidate",
            (1, y.len()),
            (1, state.classes()),
        ));
    }
    let v = state.factor().solve_vec(&cross)?;
    let raw = self_kernel - dot(&cross, &v);
    let threshold = degenerate_threshold(state, self_kernel);
    if !(raw > threshold) {
        return Err(Error::DegenerateCandidate {
            schur: raw,
            threshold,
        });
    }
    let residual: Vec<f64> = y.iter().zip(network_output).map(|(a, b)| a - b).collect();
    let r = state.residual();
    let coefficient = (0..state.classes())
        .map(|c| (0..state.len()).map(|i| v[i] * r[(i, c)]).sum::<f64>() - residual[c])
        .collect();
    Ok(CandidateContext {
        input: x.to_vec(),
        pseudo_label: y.to_vec(),
        network_output: network_output.to_vec(),
        cross,
        self_kernel,
        v,
        schur: raw + state.factor().jitter_applied(),
        residual,
        coefficient,
    })
}

/// Computes `Θ(X,x')`, `v`, `u` and `r'` for one candidate.
pub fn prepare_candidate(state: &KernelState, x: &[f64], y: &[f64]) -> Result<CandidateContext> {
    let xm = Matrix::row_vector(x);
    let prepared = state.prepare(&xm)?;
    let cross = state.cross_prepared(&prepared)?.into_vec();
    let self_kernel = state.kernel().diag(&prepared)?[0];
    let f_val = state.network_outputs(&xm)?.into_vec();
    prepare_candidate_with(state, x, y, &f_val, cross, self_kernel)
}

/// Look-ahead prediction at `q` from precomputed pieces: the current
/// linearized prediction `base`, `Θ(q, X)` and `Θ(q, x')`.
pub fn lookahead_predict_with(
    ctx: &CandidateContext,
    base: &Matrix,
    cross_q: &Matrix,
    cross_q_cand: &[f64],
) -> Result<Matrix> {
    if cross_q.cols() != ctx.v.len() || cross_q_cand.len() != base.rows() {
        return Err(Error::shape("lookahead_predict", cross_q.shape(), (base.rows(), ctx.v.len())));
    }
    let mut out = base.clone();
    for r in 0..out.rows() {
        let a = (dot(cross_q.row(r), &ctx.v) - cross_q_cand[r]) / ctx.schur;
        for (o, c) in out.row_mut(r).iter_mut().zip(&ctx.coefficient) {
            *o += a * c;
        }
    }
    Ok(out)
}

/// Linearized prediction at `q` after adding `(x', y')` to the labeled set.
pub fn lookahead_predict(state: &KernelState, ctx: &CandidateContext, q: &Matrix) -> Result<Matrix> {
    let qp = state.prepare(q)?;
    let cross_q = state.cross_prepared(&qp)?;
    let base = predict_lin_with(state, q, &cross_q)?;
    let cand = state.prepare(&Matrix::row_vector(&ctx.input))?;
    let cross_q_cand = state.kernel().between(&qp, &cand)?.into_vec();
    lookahead_predict_with(ctx, &base, &cross_q, &cross_q_cand)
}

/// Adds `(x', y')` to the state by extending the Cholesky factor with one
/// row. `f_val` is the (frozen) network output at `x'`.
pub fn augment_state(state: &KernelState, x: &[f64], y: &[f64], f_val: &[f64]) -> Result<KernelState> {
    let xm = Matrix::row_vector(x);
    let prepared: Prepared = state.prepare(&xm)?;
    let cross = state.cross_prepared(&prepared)?.into_vec();
    let self_kernel = state.kernel().diag(&prepared)?[0];
    // validates shapes and degeneracy
    prepare_candidate_with(state, x, y, f_val, cross.clone(), self_kernel)?;
    let factor = state.factor().extend(&cross, self_kernel)?;
    state.bordered(x, y, f_val, &cross, self_kernel, factor)
}

/// Direct evaluation of the augmented kernel regression by refactorizing the
/// bordered gram; the reference the block formula must reproduce.
pub fn direct_augmented_predict(
    state: &KernelState,
    x: &[f64],
    y: &[f64],
    q: &Matrix,
) -> Result<Matrix> {
    let xm = Matrix::row_vector(x);
    let f_val = state.network_outputs(&xm)?;
    let inputs = state.inputs().vstack(&xm)?;
    let targets = state.targets().vstack(&Matrix::row_vector(y))?;
    let grown = KernelState::build(
        state.kernel().clone(),
        state.network(),
        inputs,
        targets,
        state.options().clone(),
    )?;
    debug_assert_eq!(grown.outputs().row(grown.len() - 1), f_val.row(0));
    let w = chol_solve(grown.factor(), grown.residual())?;
    let mut out = state.network_outputs(q)?;
    out.add_assign(&matmul(&grown.cross_kernel(q)?, &w)?)?;
    Ok(out)
}
