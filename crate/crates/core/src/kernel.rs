//! Empirical and infinite-width neural tangent kernels, and the cached
//! kernel-regression state of a labeled set.
//!
//! Only the scalar first-logit kernel is ever formed; the multi-logit kernel
//! is that scalar kernel ⊗ `I_C`, which acts on a residual matrix column by
//! column.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{chol_solve, cholesky, dot, matmul, CholeskyFactor, JitterPolicy, Matrix};
use crate::net::{forward, grad_first_logit, ntk_factors, Activation, GradFeatures, MlpConfig, MlpParams, NtkFactors};

/// How an empirical kernel block is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NtkRoute {
    /// Dot products of flattened length-`P` gradient vectors.
    Features,
    /// Layerwise activation/delta factors; same kernel, `O(Σ n_l)` per row.
    #[default]
    Factored,
}

fn check_cols(config: &MlpConfig, m: &Matrix) -> Result<()> {
    if m.cols() != config.input_dim() {
        return Err(Error::shape("kernel", m.shape(), (m.rows(), config.input_dim())));
    }
    Ok(())
}

fn features(params: &MlpParams, x: &Matrix) -> Result<Vec<GradFeatures>> {
    (0..x.rows())
        .into_par_iter()
        .map(|r| grad_first_logit(params, x.row(r)))
        .collect()
}

fn feature_block(a: &[GradFeatures], b: &[GradFeatures]) -> Matrix {
    let cols = b.len();
    let mut out = Matrix::zeros(a.len(), cols);
    if cols == 0 {
        return out;
    }
    out.as_mut_slice()
        .par_chunks_mut(cols)
        .zip(a.par_iter())
        .for_each(|(row, fa)| {
            for (v, fb) in row.iter_mut().zip(b) {
                *v = fa.dot(fb);
            }
        });
    out
}

/// `Θ(a_i, b_j) = ∇θ f^(1)(a_i) · ∇θ f^(1)(b_j)` from flattened gradients.
pub fn empirical_ntk(params: &MlpParams, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_cols(params.config(), a)?;
    check_cols(params.config(), b)?;
    let fa = features(params, a)?;
    let fb = features(params, b)?;
    Ok(feature_block(&fa, &fb))
}

/// The same kernel as [`empirical_ntk`], through layerwise factors.
pub fn empirical_ntk_factored(params: &MlpParams, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let fa = ntk_factors(params, a)?;
    let fb = ntk_factors(params, b)?;
    Ok(fa.kernel(&fb))
}

/// `(E[σ(u)σ(v)], E[σ'(u)σ'(v)])` for `(u, v)` centred Gaussian with the
/// given covariance entries.
fn dual(act: Activation, s11: f64, s22: f64, s12: f64) -> (f64, f64) {
    match act {
        Activation::Relu => {
            let norm = (s11 * s22).sqrt();
            if norm <= 0.0 {
                return (0.0, 0.5);
            }
            let c = (s12 / norm).clamp(-1.0, 1.0);
            let theta = c.acos();
            let pi = std::f64::consts::PI;
            let e = norm / (2.0 * pi) * (theta.sin() + (pi - theta) * c);
            let ed = (pi - theta) / (2.0 * pi);
            (e, ed)
        }
        Activation::Erf => {
            let pi = std::f64::consts::PI;
            let d = (1.0 + 2.0 * s11) * (1.0 + 2.0 * s22);
            let e = 2.0 / pi * (2.0 * s12 / d.sqrt()).clamp(-1.0, 1.0).asin();
            let ed = 4.0 / pi / (d - 4.0 * s12 * s12).sqrt();
            (e, ed)
        }
        Activation::Identity => (s12, 1.0),
    }
}

/// Infinite-width NTK of a fully-connected network with the architecture of
/// `config` (per logit).
///
/// Layerwise recursion for the NTK parameterization with unit weight
/// variance and bias scale β:
///
/// ```text
/// Σ¹(x, y) = xᵀy / n_0 + β²                  Θ¹ = Σ¹
/// Σˡ⁺¹     = E[σ(u)σ(v)] + β²                Σ̇ˡ⁺¹ = E[σ'(u)σ'(v)]
/// Θˡ⁺¹     = Θˡ · Σ̇ˡ⁺¹ + Σˡ⁺¹
/// ```
///
/// with `(u, v) ~ N(0, Σˡ restricted to {x, y})`. ReLU uses the arc-cosine
/// closed forms and erf the arcsine ones.
pub fn infinite_ntk_fc(config: &MlpConfig, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    config.validate()?;
    let act = config.activation;
    if act == Activation::Identity {
        return Err(Error::UnsupportedActivation(act));
    }
    check_cols(config, a)?;
    check_cols(config, b)?;
    let n0 = config.input_dim() as f64;
    let b2 = config.beta * config.beta;
    let hidden = config.depth() - 1;

    let diag_chain = |x: &[f64]| -> Vec<f64> {
        let mut s = dot(x, x) / n0 + b2;
        let mut chain = vec![s];
        for _ in 0..hidden {
            s = dual(act, s, s, s).0 + b2;
            chain.push(s);
        }
        chain
    };
    let da: Vec<Vec<f64>> = a.row_iter().map(diag_chain).collect();
    let db: Vec<Vec<f64>> = b.row_iter().map(diag_chain).collect();

    let cols = b.rows();
    let mut out = Matrix::zeros(a.rows(), cols);
    if cols == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| {
            let x = a.row(i);
            for (j, v) in row.iter_mut().enumerate() {
                let mut s12 = dot(x, b.row(j)) / n0 + b2;
                let mut theta = s12;
                for l in 0..hidden {
                    let (e, ed) = dual(act, da[i][l], db[j][l], s12);
                    s12 = e + b2;
                    theta = theta * ed + s12;
                }
                *v = theta;
            }
        });
    Ok(out)
}

/// A kernel function over input rows.
#[derive(Clone, Debug)]
pub enum TangentKernel {
    /// Empirical NTK at fixed network parameters.
    Empirical { params: MlpParams, route: NtkRoute },
    /// Analytic infinite-width NTK of the architecture.
    Infinite { config: MlpConfig },
}

/// Per-row data from which kernel blocks are assembled.
#[derive(Clone, Debug)]
pub enum Prepared {
    Features(Vec<GradFeatures>),
    Factors(NtkFactors),
    Inputs(Matrix),
}

impl Prepared {
    pub fn rows(&self) -> usize {
        match self {
            Prepared::Features(f) => f.len(),
            Prepared::Factors(f) => f.rows(),
            Prepared::Inputs(m) => m.rows(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Prepared {
        match self {
            Prepared::Features(f) => Prepared::Features(idx.iter().map(|&i| f[i].clone()).collect()),
            Prepared::Factors(f) => Prepared::Factors(f.select_rows(idx)),
            Prepared::Inputs(m) => Prepared::Inputs(m.select_rows(idx)),
        }
    }

    fn append(&self, other: &Prepared) -> Result<Prepared> {
        Ok(match (self, other) {
            (Prepared::Features(a), Prepared::Features(b)) => {
                Prepared::Features(a.iter().chain(b).cloned().collect())
            }
            (Prepared::Factors(a), Prepared::Factors(b)) => Prepared::Factors(a.append(b)),
            (Prepared::Inputs(a), Prepared::Inputs(b)) => Prepared::Inputs(a.vstack(b)?),
            _ => return Err(Error::Contract("mixing prepared kernel rows of different kinds".into())),
        })
    }
}

impl TangentKernel {
    pub fn empirical(params: MlpParams) -> Self {
        TangentKernel::Empirical {
            params,
            route: NtkRoute::Factored,
        }
    }

    pub fn config(&self) -> &MlpConfig {
        match self {
            TangentKernel::Empirical { params, .. } => params.config(),
            TangentKernel::Infinite { config } => config,
        }
    }

    pub fn prepare(&self, x: &Matrix) -> Result<Prepared> {
        check_cols(self.config(), x)?;
        match self {
            TangentKernel::Empirical {
                params,
                route: NtkRoute::Features,
            } => Ok(Prepared::Features(features(params, x)?)),
            TangentKernel::Empirical {
                params,
                route: NtkRoute::Factored,
            } => Ok(Prepared::Factors(ntk_factors(params, x)?)),
            TangentKernel::Infinite { config } => {
                if config.activation == Activation::Identity {
                    return Err(Error::UnsupportedActivation(config.activation));
                }
                Ok(Prepared::Inputs(x.clone()))
            }
        }
    }

    pub fn between(&self, a: &Prepared, b: &Prepared) -> Result<Matrix> {
        match (self, a, b) {
            (_, Prepared::Features(fa), Prepared::Features(fb)) => Ok(feature_block(fa, fb)),
            (_, Prepared::Factors(fa), Prepared::Factors(fb)) => Ok(fa.kernel(fb)),
            (TangentKernel::Infinite { config }, Prepared::Inputs(xa), Prepared::Inputs(xb)) => {
                infinite_ntk_fc(config, xa, xb)
            }
            _ => Err(Error::Contract("prepared rows do not match the kernel kind".into())),
        }
    }

    pub fn diag(&self, a: &Prepared) -> Result<Vec<f64>> {
        match (self, a) {
            (_, Prepared::Features(f)) => Ok(f.iter().map(|g| g.dot(g)).collect()),
            (_, Prepared::Factors(f)) => Ok(f.diag()),
            (TangentKernel::Infinite { config }, Prepared::Inputs(x)) => (0..x.rows())
                .map(|r| {
                    let row = Matrix::row_vector(x.row(r));
                    Ok(infinite_ntk_fc(config, &row, &row)?[(0, 0)])
                })
                .collect(),
            _ => Err(Error::Contract("prepared rows do not match the kernel kind".into())),
        }
    }

    pub fn matrix(&self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        self.between(&self.prepare(a)?, &self.prepare(b)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    pub jitter: JitterPolicy,
    /// Labeled sets with at most this many rows keep their prepared kernel
    /// rows in the state; larger sets recompute them on demand.
    pub cache_row_budget: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            jitter: JitterPolicy::default(),
            cache_row_budget: 4096,
        }
    }
}

/// Kernel regression of the labeled residual, cached for repeated queries.
#[derive(Clone, Debug)]
pub struct KernelState {
    kernel: TangentKernel,
    network: MlpParams,
    options: KernelOptions,
    inputs: Matrix,
    targets: Matrix,
    outputs: Matrix,
    residual: Matrix,
    gram: Matrix,
    factor: CholeskyFactor,
    solved: Matrix,
    cache: Option<Prepared>,
}

fn symmetrize(m: &mut Matrix) {
    let n = m.rows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

impl KernelState {
    /// Builds the state for `(inputs, targets)`; `network` supplies `f_L`.
    pub fn build(
        kernel: TangentKernel,
        network: &MlpParams,
        inputs: Matrix,
        targets: Matrix,
        options: KernelOptions,
    ) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::EmptyInput("labeled set"));
        }
        if targets.rows() != inputs.rows() || targets.cols() != network.config().output_dim() {
            return Err(Error::shape("build_state", inputs.shape(), targets.shape()));
        }
        let outputs = forward(network, &inputs)?;
        let prepared = kernel.prepare(&inputs)?;
        let mut gram = kernel.between(&prepared, &prepared)?;
        symmetrize(&mut gram);
        let factor = cholesky(&gram, &options.jitter)?;
        let residual = targets.sub(&outputs)?;
        let solved = chol_solve(&factor, &residual)?;
        let cache = (inputs.rows() <= options.cache_row_budget).then_some(prepared);
        Ok(KernelState {
            kernel,
            network: network.clone(),
            options,
            inputs,
            targets,
            outputs,
            residual,
            gram,
            factor,
            solved,
            cache,
        })
    }

    pub fn kernel(&self) -> &TangentKernel {
        &self.kernel
    }

    pub fn network(&self) -> &MlpParams {
        &self.network
    }

    pub fn options(&self) -> &KernelOptions {
        &self.options
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.targets.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    /// `f_L(X)`, frozen when the state was built or augmented.
    pub fn outputs(&self) -> &Matrix {
        &self.outputs
    }

    /// `Y − f_L(X)`.
    pub fn residual(&self) -> &Matrix {
        &self.residual
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    /// `W = Θ(X, X)⁻¹ R`.
    pub fn solved_residual(&self) -> &Matrix {
        &self.solved
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn prepare(&self, q: &Matrix) -> Result<Prepared> {
        self.kernel.prepare(q)
    }

    pub fn labeled_prepared(&self) -> Result<std::borrow::Cow<'_, Prepared>> {
        match &self.cache {
            Some(p) => Ok(std::borrow::Cow::Borrowed(p)),
            None => Ok(std::borrow::Cow::Owned(self.kernel.prepare(&self.inputs)?)),
        }
    }

    /// `Θ(q, X)` for prepared query rows.
    pub fn cross_prepared(&self, q: &Prepared) -> Result<Matrix> {
        let labeled = self.labeled_prepared()?;
        self.kernel.between(q, &labeled)
    }

    /// `Θ(q, X)`, `|q| × L`.
    pub fn cross_kernel(&self, q: &Matrix) -> Result<Matrix> {
        self.cross_prepared(&self.prepare(q)?)
    }

    /// Network outputs `f_L(q)`.
    pub fn network_outputs(&self, q: &Matrix) -> Result<Matrix> {
        forward(&self.network, q)
    }

    /// Returns the state over `L ∪ {(x', y')}` given the bordered factor.
    pub(crate) fn bordered(
        &self,
        x: &[f64],
        y: &[f64],
        f_val: &[f64],
        cross: &[f64],
        self_kernel: f64,
        factor: CholeskyFactor,
    ) -> Result<KernelState> {
        let n = self.len();
        let mut gram = Matrix::zeros(n + 1, n + 1);
        for i in 0..n {
            gram.row_mut(i)[..n].copy_from_slice(self.gram.row(i));
            gram[(i, n)] = cross[i];
        }
        gram.row_mut(n)[..n].copy_from_slice(cross);
        gram[(n, n)] = self_kernel;
        let mut inputs = self.inputs.clone();
        inputs.push_row(x)?;
        let mut targets = self.targets.clone();
        targets.push_row(y)?;
        let mut outputs = self.outputs.clone();
        outputs.push_row(f_val)?;
        let residual = targets.sub(&outputs)?;
        let solved = chol_solve(&factor, &residual)?;
        let cache = match &self.cache {
            Some(p) if n + 1 <= self.options.cache_row_budget => {
                Some(p.append(&self.kernel.prepare(&Matrix::row_vector(x))?)?)
            }
            _ => None,
        };
        Ok(KernelState {
            kernel: self.kernel.clone(),
            network: self.network.clone(),
            options: self.options.clone(),
            inputs,
            targets,
            outputs,
            residual,
            gram,
            factor,
            solved,
            cache,
        })
    }

    /// Applies the C-logit kernel `Θ(X,X) ⊗ I_C` to the solved residual.
    pub fn gram_times_solved(&self) -> Matrix {
        matmul(&self.gram, &self.solved).expect("gram is L×L and solved is L×C")
    }
}

/// Empirical-kernel state for a labeled dataset, at the given parameters.
pub fn build_state(params: &MlpParams, labeled: &Dataset) -> Result<KernelState> {
    KernelState::build(
        TangentKernel::empirical(params.clone()),
        params,
        labeled.inputs.clone(),
        labeled.one_hot.clone(),
        KernelOptions::default(),
    )
}

/// Writes `rows cols` followed by the row-major values.
pub fn write_matrix_text<W: Write>(m: &Matrix, mut w: W) -> Result<()> {
    writeln!(w, "{} {}", m.rows(), m.cols())?;
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_matrix_text<R: BufRead>(r: R) -> Result<Matrix> {
    let mut tokens = Vec::new();
    for line in r.lines() {
        tokens.extend(line?.split_whitespace().map(str::to_owned));
    }
    let parse_dim = |s: Option<&String>| -> Result<usize> {
        s.and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format("matrix file must start with `rows cols`".into()))
    };
    let rows = parse_dim(tokens.first())?;
    let cols = parse_dim(tokens.get(1))?;
    let data = tokens[2..]
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad matrix value {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if data.len() != rows * cols {
        return Err(Error::Length {
            expected: rows * cols,
            found: data.len(),
        });
    }
    Matrix::new(rows, cols, data)
}
