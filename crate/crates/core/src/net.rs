//! Fully-connected network in the NTK parameterization.
//!
//! Layer `l` maps `α^(l)` (width `n_l`) to the pre-activation
//! `α̃^(l+1) = α^(l) W^(l) / √n_l + β b^(l)`; the nonlinearity is applied
//! between layers and never on the output. All parameters are drawn from a
//! standard normal, the width scaling lives in the forward pass.
//!
//! Parameters flatten layer-major, weights (row-major `n_l × n_{l+1}`) before
//! biases: `W^(0), b^(0), W^(1), b^(1), …`. Gradient features use the same
//! order so their dot products are comparable everywhere.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

pub const CHECKPOINT_MAGIC: &str = "NTKAL-MLP-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Erf,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Erf => libm::erf(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp(),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Erf => "erf",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "erf" => Ok(Activation::Erf),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Format(format!(
                "unknown activation {other:?} (expected relu, erf or identity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// `n_0, …, n_L`: input dimension, hidden widths, number of outputs.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Bias scale β.
    pub beta: f64,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        MlpConfig {
            widths,
            activation,
            beta: 1.0,
            seed: 0,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Contract(format!(
                "network needs at least 2 widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Contract(format!(
                "all widths must be >= 1, got {:?}",
                self.widths
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Contract(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// `P = Σ (n_l + 1) n_{l+1}`.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `n_in × n_out`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    config: MlpConfig,
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .widths
            .windows(2)
            .map(|w| Layer {
                weights: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(MlpParams {
            config: config.clone(),
            layers,
        })
    }

    pub fn from_flat(config: &MlpConfig, flat: &[f64]) -> Result<Self> {
        let mut params = MlpParams::zeros(config)?;
        if flat.len() != config.param_count() {
            return Err(Error::Consistency(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for layer in &mut params.layers {
            let nw = layer.weights.rows() * layer.weights.cols();
            layer.weights.as_mut_slice().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(params)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Standard-normal initialization, deterministic in `config.seed`.
pub fn init(config: &MlpConfig) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for layer in &mut params.layers {
        for w in layer.weights.as_mut_slice() {
            *w = StandardNormal.sample(&mut rng);
        }
        for b in &mut layer.bias {
            *b = StandardNormal.sample(&mut rng);
        }
    }
    Ok(params)
}

fn check_input(params: &MlpParams, x: &Matrix) -> Result<()> {
    let n0 = params.config.input_dim();
    if x.cols() != n0 {
        return Err(Error::shape("forward", x.shape(), (x.rows(), n0)));
    }
    Ok(())
}

/// `act · W / √n + β b` for one layer.
fn affine(act: &Matrix, layer: &Layer, beta: f64) -> Matrix {
    let scale = 1.0 / (layer.weights.rows() as f64).sqrt();
    let mut z = matmul(act, &layer.weights).expect("layer shapes are consistent");
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v = *v * scale + beta * b;
        }
    }
    z
}

/// Activations and pre-activations of one batch.
struct Trace {
    /// `α^(l)` for `l = 0..L`; `acts[0]` is the input.
    acts: Vec<Matrix>,
    /// Hidden pre-activations `α̃^(l)` for `l = 1..L`.
    pre: Vec<Matrix>,
    output: Matrix,
}

fn trace(params: &MlpParams, x: &Matrix) -> Trace {
    let act_fn = params.config.activation;
    let beta = params.config.beta;
    let depth = params.layers.len();
    let mut acts = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth.saturating_sub(1));
    let mut cur = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let z = affine(&cur, layer, beta);
        acts.push(cur);
        if l + 1 == depth {
            return Trace {
                acts,
                pre,
                output: z,
            };
        }
        cur = z.map(|v| act_fn.apply(v));
        pre.push(z);
    }
    unreachable!("network has at least one layer")
}

/// Network outputs for a batch of rows (`batch × C`).
pub fn forward(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    check_input(params, x)?;
    let act_fn = params.config.activation;
    let beta = params.config.beta;
    let depth = params.layers.len();
    let mut cur = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let z = affine(&cur, layer, beta);
        cur = if l + 1 == depth {
            z
        } else {
            z.map(|v| act_fn.apply(v))
        };
    }
    Ok(cur)
}

/// Backpropagates `d_out` (∂loss/∂output, `batch × C`) into per-layer
/// gradients and the deltas `∂loss/∂α̃^(l+1)`.
fn backward(params: &MlpParams, tr: &Trace, d_out: Matrix) -> (Vec<Matrix>, Vec<Vec<f64>>, Vec<Matrix>) {
    let beta = params.config.beta;
    let act_fn = params.config.activation;
    let depth = params.layers.len();
    let mut d_w = vec![Matrix::zeros(0, 0); depth];
    let mut d_b = vec![Vec::new(); depth];
    let mut deltas = vec![Matrix::zeros(0, 0); depth];
    let mut delta = d_out;
    for l in (0..depth).rev() {
        let layer = &params.layers[l];
        let scale = 1.0 / (layer.weights.rows() as f64).sqrt();
        d_w[l] = matmul_tn(&tr.acts[l], &delta)
            .expect("trace shapes are consistent")
            .scale(scale);
        let mut db = vec![0.0; delta.cols()];
        for row in delta.row_iter() {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += beta * v;
            }
        }
        d_b[l] = db;
        if l > 0 {
            let mut prev = matmul_nt(&delta, &layer.weights).expect("trace shapes are consistent");
            let z = &tr.pre[l - 1];
            for (p, &zv) in prev.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *p *= scale * act_fn.derivative(zv);
            }
            deltas[l] = std::mem::replace(&mut delta, prev);
        } else {
            deltas[l] = std::mem::replace(&mut delta, Matrix::zeros(0, 0));
        }
    }
    (d_w, d_b, deltas)
}

/// Flattened `∂f^(1)(x)/∂θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradFeatures(pub Vec<f64>);

impl GradFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &GradFeatures) -> f64 {
        crate::linalg::dot(&self.0, &other.0)
    }
}

fn first_logit_seed(rows: usize, outputs: usize) -> Matrix {
    let mut d = Matrix::zeros(rows, outputs);
    for r in 0..rows {
        d[(r, 0)] = 1.0;
    }
    d
}

/// Exact reverse-mode gradient of the first output logit at one input.
pub fn grad_first_logit(params: &MlpParams, x: &[f64]) -> Result<GradFeatures> {
    let xm = Matrix::row_vector(x);
    check_input(params, &xm)?;
    let tr = trace(params, &xm);
    let (d_w, d_b, _) = backward(params, &tr, first_logit_seed(1, params.config.output_dim()));
    let mut out = Vec::with_capacity(params.param_count());
    for (w, b) in d_w.iter().zip(&d_b) {
        out.extend_from_slice(w.as_slice());
        out.extend_from_slice(b);
    }
    Ok(GradFeatures(out))
}

/// Layerwise factors of the first-logit gradients for a batch of inputs.
///
/// The gradient of `f^(1)` with respect to `W^(l)` is the outer product of
/// `α^(l)/√n_l` and `δ^(l+1) = ∂f^(1)/∂α̃^(l+1)`, and with respect to `b^(l)`
/// it is `β δ^(l+1)`. Hence
/// `∇f^(1)(x)·∇f^(1)(y) = Σ_l (⟨a_l(x), a_l(y)⟩ + β²) ⟨δ_{l+1}(x), δ_{l+1}(y)⟩`
/// with `a_l = α^(l)/√n_l`, which needs only `O(Σ n_l)` memory per input
/// instead of `O(P)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkFactors {
    /// `a_l`, one `rows × n_l` matrix per layer.
    pub acts: Vec<Matrix>,
    /// `δ_{l+1}`, one `rows × n_{l+1}` matrix per layer.
    pub deltas: Vec<Matrix>,
    pub beta: f64,
}

impl NtkFactors {
    pub fn rows(&self) -> usize {
        self.acts[0].rows()
    }

    /// Kernel block between the rows of `self` and the rows of `other`.
    pub fn kernel(&self, other: &NtkFactors) -> Matrix {
        let b2 = self.beta * self.beta;
        let mut out = Matrix::zeros(self.rows(), other.rows());
        for l in 0..self.acts.len() {
            let mut aa = matmul_nt(&self.acts[l], &other.acts[l]).expect("same layer widths");
            let dd = matmul_nt(&self.deltas[l], &other.deltas[l]).expect("same layer widths");
            for ((o, a), d) in out
                .as_mut_slice()
                .iter_mut()
                .zip(aa.as_mut_slice().iter_mut())
                .zip(dd.as_slice())
            {
                *o += (*a + b2) * d;
            }
        }
        out
    }

    /// `Θ(x, x)` for every row.
    pub fn diag(&self) -> Vec<f64> {
        let b2 = self.beta * self.beta;
        (0..self.rows())
            .map(|r| {
                (0..self.acts.len())
                    .map(|l| {
                        let a = self.acts[l].row(r);
                        let d = self.deltas[l].row(r);
                        (crate::linalg::dot(a, a) + b2) * crate::linalg::dot(d, d)
                    })
                    .sum()
            })
            .collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> NtkFactors {
        NtkFactors {
            acts: self.acts.iter().map(|m| m.select_rows(idx)).collect(),
            deltas: self.deltas.iter().map(|m| m.select_rows(idx)).collect(),
            beta: self.beta,
        }
    }

    pub fn append(&self, other: &NtkFactors) -> NtkFactors {
        NtkFactors {
            acts: self
                .acts
                .iter()
                .zip(&other.acts)
                .map(|(a, b)| a.vstack(b).expect("same layer widths"))
                .collect(),
            deltas: self
                .deltas
                .iter()
                .zip(&other.deltas)
                .map(|(a, b)| a.vstack(b).expect("same layer widths"))
                .collect(),
            beta: self.beta,
        }
    }
}

/// Computes [`NtkFactors`] for each row of `x` with one batched backward pass.
pub fn ntk_factors(params: &MlpParams, x: &Matrix) -> Result<NtkFactors> {
    check_input(params, x)?;
    let tr = trace(params, x);
    let seed = first_logit_seed(x.rows(), params.config.output_dim());
    let (_, _, deltas) = backward(params, &tr, seed);
    let acts = tr
        .acts
        .iter()
        .map(|a| a.scale(1.0 / (a.cols() as f64).sqrt()))
        .collect();
    Ok(NtkFactors {
        acts,
        deltas,
        beta: params.config.beta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub shuffle_seed: u64,
    /// Continue from the given parameters; otherwise re-initialize from the
    /// network config's seed.
    pub warm_start: bool,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 100,
            minibatch_size: 32,
            shuffle_seed: 0,
            warm_start: true,
            lr_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Contract(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be >= 1".into()));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Contract("minibatch size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Contract(format!(
                "lr decay must be > 0, got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

/// `½‖Y − f(X)‖²` summed over rows.
pub fn squared_loss(params: &MlpParams, inputs: &Matrix, targets: &Matrix) -> Result<f64> {
    let out = forward(params, inputs)?;
    let diff = out.sub(targets)?;
    Ok(0.5 * diff.as_slice().iter().map(|v| v * v).sum::<f64>())
}

/// Minibatch SGD on the squared loss (mean over each minibatch).
pub fn train_sgd(
    params: &MlpParams,
    inputs: &Matrix,
    targets: &Matrix,
    cfg: &TrainConfig,
) -> Result<MlpParams> {
    cfg.validate()?;
    check_input(params, inputs)?;
    if inputs.rows() == 0 {
        return Err(Error::EmptyInput("training set"));
    }
    if targets.rows() != inputs.rows() || targets.cols() != params.config.output_dim() {
        return Err(Error::shape("train_sgd", inputs.shape(), targets.shape()));
    }
    let mut params = if cfg.warm_start {
        params.clone()
    } else {
        init(&params.config)?
    };
    let n = inputs.rows();
    let initial = squared_loss(&params, inputs, targets)?;
    let limit = 1e6 * initial.max(1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut lr = cfg.learning_rate;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.minibatch_size) {
            let xb = inputs.select_rows(batch);
            let yb = targets.select_rows(batch);
            let tr = trace(&params, &xb);
            let mut d_out = tr.output.sub(&yb)?;
            epoch_loss += 0.5 * d_out.as_slice().iter().map(|v| v * v).sum::<f64>();
            let inv = 1.0 / batch.len() as f64;
            for v in d_out.as_mut_slice() {
                *v *= inv;
            }
            let (d_w, d_b, _) = backward(&params, &tr, d_out);
            for ((layer, gw), gb) in params.layers.iter_mut().zip(&d_w).zip(&d_b) {
                for (w, g) in layer.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                    *w -= lr * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(gb) {
                    *b -= lr * g;
                }
            }
        }
        if !epoch_loss.is_finite() || epoch_loss > limit || !params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
                initial,
            });
        }
        lr *= cfg.lr_decay;
    }
    Ok(params)
}

/// [`train_sgd`] on a dataset's inputs and one-hot targets.
pub fn train_on(params: &MlpParams, data: &Dataset, cfg: &TrainConfig) -> Result<MlpParams> {
    train_sgd(params, &data.inputs, &data.one_hot, cfg)
}

/// Writes config and flattened parameters as versioned text. Values use the
/// shortest round-trip representation, so loading is bit-exact.
pub fn save_checkpoint<W: Write>(params: &MlpParams, mut w: W) -> Result<()> {
    let cfg = &params.config;
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    let widths: Vec<String> = cfg.widths.iter().map(|v| v.to_string()).collect();
    writeln!(w, "widths {}", widths.join(" "))?;
    writeln!(w, "activation {}", cfg.activation.name())?;
    writeln!(w, "beta {}", cfg.beta)?;
    writeln!(w, "seed {}", cfg.seed)?;
    let flat = params.flatten();
    writeln!(w, "params {}", flat.len())?;
    for v in flat {
        writeln!(w, "{v:?}")?;
    }
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(r: R) -> Result<MlpParams> {
    let mut lines = r.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format(format!("checkpoint ended before {what}")))
    };
    let magic = next("magic")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| Error::Format(format!("expected `{key} …`, found {line:?}")))
    }
    fn num<T: FromStr>(s: &str) -> Result<T> {
        s.trim()
            .parse()
            .map_err(|_| Error::Format(format!("cannot parse number {s:?}")))
    }
    let widths = field(&next("widths")?, "widths")?
        .split_whitespace()
        .map(num::<usize>)
        .collect::<Result<Vec<_>>>()?;
    let activation: Activation = field(&next("activation")?, "activation")?.trim().parse()?;
    let beta = num(field(&next("beta")?, "beta")?)?;
    let seed = num(field(&next("seed")?, "seed")?)?;
    let count: usize = num(field(&next("params")?, "params")?)?;
    let config = MlpConfig {
        widths,
        activation,
        beta,
        seed,
    };
    let mut flat = Vec::with_capacity(count);
    for _ in 0..count {
        flat.push(num::<f64>(&next("parameter values")?)?);
    }
    MlpParams::from_flat(&config, &flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_formula() {
        let cfg = MlpConfig::new(vec![2, 3, 2], Activation::Relu);
        assert_eq!(cfg.param_count(), 17);
        let p = init(&cfg).unwrap();
        assert_eq!(p.param_count(), 17);
        assert_eq!(p.flatten().len(), 17);
    }

    #[test]
    fn config_validation() {
        assert!(MlpConfig::new(vec![3], Activation::Relu).validate().is_err());
        assert!(MlpConfig::new(vec![3, 0, 1], Activation::Relu).validate().is_err());
        assert!(MlpConfig::new(vec![3, 1], Activation::Relu)
            .with_beta(-1.0)
            .validate()
            .is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = MlpConfig::new(vec![4, 8, 3], Activation::Erf).with_seed(7);
        assert_eq!(init(&cfg).unwrap(), init(&cfg).unwrap());
        let other = init(&cfg.clone().with_seed(8)).unwrap();
        assert_ne!(init(&cfg).unwrap(), other);
    }

    #[test]
    fn init_moments() {
        let cfg = MlpConfig::new(vec![316, 316, 1], Activation::Relu).with_seed(3);
        let flat = init(&cfg).unwrap().flatten();
        assert!(flat.len() >= 100_000);
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let var = flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = MlpConfig::new(vec![3, 5, 2], Activation::Relu);
        let p = MlpParams::zeros(&cfg).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        let out = forward(&p, &x).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_by_hand() {
        let cfg = MlpConfig::new(vec![2, 1], Activation::Identity).with_beta(0.0);
        let p = MlpParams::from_flat(&cfg, &[1.0, 2.0, 0.0]).unwrap();
        let out = forward(&p, &Matrix::row_vector(&[3.0, 4.0])).unwrap();
        let expected = 11.0 / 2.0f64.sqrt();
        assert!((out[(0, 0)] - expected).abs() < 1e-12);
        assert!((out[(0, 0)] - 7.7782).abs() < 1e-4);
    }

    #[test]
    fn batched_forward_equals_rowwise() {
        let cfg = MlpConfig::new(vec![3, 16, 16, 4], Activation::Relu).with_seed(11);
        let p = init(&cfg).unwrap();
        let x = Matrix::from_fn(9, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let batched = forward(&p, &x).unwrap();
        for r in 0..x.rows() {
            let single = forward(&p, &Matrix::row_vector(x.row(r))).unwrap();
            assert_eq!(single.row(0), batched.row(r));
        }
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let p = init(&MlpConfig::new(vec![3, 4, 2], Activation::Relu)).unwrap();
        assert!(matches!(
            forward(&p, &Matrix::zeros(2, 4)),
            Err(Error::Shape { .. })
        ));
        assert!(grad_first_logit(&p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bias_gradient_at_zero_input() {
        for beta in [0.0, 1.0] {
            let cfg = MlpConfig::new(vec![2, 5, 3], Activation::Relu)
                .with_beta(beta)
                .with_seed(1);
            let p = init(&cfg).unwrap();
            let g = grad_first_logit(&p, &[0.0, 0.0]).unwrap();
            // last-layer bias block is the final 3 entries; logit 1 is the first
            let last_bias = &g.as_slice()[g.len() - 3..];
            assert_eq!(last_bias[0], beta);
            assert_eq!(last_bias[1], 0.0);
            assert_eq!(last_bias[2], 0.0);
        }
    }

    #[test]
    fn linear_layer_weight_gradient_is_scaled_input() {
        let cfg = MlpConfig::new(vec![3, 2], Activation::Identity).with_seed(5);
        let p = init(&cfg).unwrap();
        let x = [0.3, -1.2, 2.0];
        let g = grad_first_logit(&p, &x).unwrap();
        // W^(0) is 3×2 row-major; column 0 belongs to logit 1
        for (i, xi) in x.iter().enumerate() {
            assert!((g.as_slice()[i * 2] - xi / 3.0f64.sqrt()).abs() < 1e-15);
            assert_eq!(g.as_slice()[i * 2 + 1], 0.0);
        }
    }

    #[test]
    fn factors_reproduce_feature_dots() {
        let cfg = MlpConfig::new(vec![3, 7, 5, 2], Activation::Erf)
            .with_beta(0.7)
            .with_seed(21);
        let p = init(&cfg).unwrap();
        let x = Matrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * 0.6 + j as f64 * 0.2);
        let f = ntk_factors(&p, &x).unwrap();
        let k = f.kernel(&f);
        let diag = f.diag();
        for i in 0..4 {
            let gi = grad_first_logit(&p, x.row(i)).unwrap();
            for j in 0..4 {
                let gj = grad_first_logit(&p, x.row(j)).unwrap();
                let want = gi.dot(&gj);
                assert!((k[(i, j)] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
            assert!((diag[i] - k[(i, i)]).abs() <= 1e-12 * diag[i].abs().max(1.0));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = MlpConfig::new(vec![2, 16, 2], Activation::Relu).with_seed(2);
        let p = init(&cfg).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5], [3.0, -2.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 50.0,
            epochs: 200,
            minibatch_size: 3,
            ..TrainConfig::default()
        };
        match train_sgd(&p, &x, &y, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let p = init(&MlpConfig::new(vec![2, 4, 2], Activation::Relu)).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train_sgd(&p, &x, &y, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = MlpConfig::new(vec![3, 6, 2], Activation::Erf)
            .with_beta(0.25)
            .with_seed(99);
        let p = init(&cfg).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&p, &mut buf).unwrap();
        assert!(buf.starts_with(CHECKPOINT_MAGIC.as_bytes()));
        let q = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);

        let bad = b"NTKAL-MLP-v0\n".to_vec();
        assert!(matches!(load_checkpoint(bad.as_slice()), Err(Error::Format(_))));
    }
}
