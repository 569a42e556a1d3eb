#![allow(dead_code)]

use ntkal::kernel::{KernelOptions, KernelState, TangentKernel};
use ntkal::linalg::Matrix;
use ntkal::net::{init, Activation, MlpConfig, MlpParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn one_hot_rows(rows: usize, classes: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, classes);
    for r in 0..rows {
        m[(r, rng.gen_range(0..classes))] = 1.0;
    }
    m
}

pub fn net(widths: &[usize], activation: Activation, seed: u64) -> MlpParams {
    init(&MlpConfig::new(widths.to_vec(), activation).with_seed(seed)).unwrap()
}

pub fn state(params: &MlpParams, x: Matrix, y: Matrix) -> KernelState {
    KernelState::build(
        TangentKernel::empirical(params.clone()),
        params,
        x,
        y,
        KernelOptions::default(),
    )
    .unwrap()
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
}

pub fn rel_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
