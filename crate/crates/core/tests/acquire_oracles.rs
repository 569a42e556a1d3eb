mod common;

use common::{net, one_hot_rows, rel_scalar, rng, state, uniform};
use ntkal::acquire::{
    eer_lin, emoc, entropy, mlmoc, naive_sgd_oracle, softmax, ChangeBaseline, Distance, Reference,
};
use ntkal::data::gen_two_gaussians;
use ntkal::kernel::KernelState;
use ntkal::linalg::{argmax, Matrix};
use ntkal::lookahead::{direct_augmented_predict, predict_lin};
use ntkal::net::{forward, train_sgd, Activation, MlpConfig, MlpParams, TrainConfig};
use rand::Rng;

fn unit(c: usize, label: usize) -> Vec<f64> {
    (0..c).map(|i| if i == label { 1.0 } else { 0.0 }).collect()
}

fn change(base: &Matrix, after: &Matrix, distance: Distance) -> f64 {
    base.row_iter()
        .zip(after.row_iter())
        .map(|(a, b)| {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            match distance {
                Distance::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
                Distance::L1 => d.iter().map(|v| v.abs()).sum(),
            }
        })
        .sum()
}

fn baseline_outputs(st: &KernelState, q: &Matrix, baseline: ChangeBaseline) -> Matrix {
    match baseline {
        ChangeBaseline::Linearized => predict_lin(st, q).unwrap(),
        ChangeBaseline::Raw => st.network_outputs(q).unwrap(),
    }
}

fn brute_mlmoc(st: &KernelState, cands: &Matrix, q: &Matrix, baseline: ChangeBaseline) -> Vec<f64> {
    let base = baseline_outputs(st, q, baseline);
    let f = st.network_outputs(cands).unwrap();
    (0..cands.rows())
        .map(|j| {
            let y = unit(f.cols(), argmax(f.row(j)));
            let after = direct_augmented_predict(st, cands.row(j), &y, q).unwrap();
            change(&base, &after, Distance::L2)
        })
        .collect()
}

fn brute_emoc(st: &KernelState, cands: &Matrix, q: &Matrix, baseline: ChangeBaseline, distance: Distance) -> Vec<f64> {
    let base = baseline_outputs(st, q, baseline);
    let f = st.network_outputs(cands).unwrap();
    (0..cands.rows())
        .map(|j| {
            let p = softmax(f.row(j));
            (0..f.cols())
                .map(|y| {
                    let after = direct_augmented_predict(st, cands.row(j), &unit(f.cols(), y), q).unwrap();
                    p[y] * change(&base, &after, distance)
                })
                .sum()
        })
        .collect()
}

fn brute_eer(st: &KernelState, cands: &Matrix, q: &Matrix) -> Vec<f64> {
    let f = st.network_outputs(cands).unwrap();
    (0..cands.rows())
        .map(|j| {
            let p = softmax(f.row(j));
            -(0..f.cols())
                .map(|y| {
                    let after = direct_augmented_predict(st, cands.row(j), &unit(f.cols(), y), q).unwrap();
                    p[y] * after.row_iter().map(|r| entropy(&softmax(r))).sum::<f64>()
                })
                .sum::<f64>()
        })
        .collect()
}

fn assert_scores_close(fast: &[f64], brute: &[f64], tol: f64) {
    assert_eq!(fast.len(), brute.len());
    for (a, b) in fast.iter().zip(brute) {
        assert!(rel_scalar(*a, *b) <= tol, "{a} vs {b}");
    }
}

fn toy(l: usize, c: usize, m: usize, seed: u64) -> (KernelState, Matrix, Matrix) {
    let mut r = rng(seed);
    let params = net(&[4, 64, c], Activation::Relu, seed);
    let st = state(&params, uniform(l, 4, &mut r), one_hot_rows(l, c, &mut r));
    (st, uniform(m, 4, &mut r), uniform(7, 4, &mut r))
}

#[test]
fn lookahead_scores_match_direct_solve_oracles() {
    for (seed, (l, c, m)) in [(5, 2, 6), (30, 3, 20), (17, 4, 12)].into_iter().enumerate() {
        let (st, cands, q) = toy(l, c, m, seed as u64);
        for baseline in [ChangeBaseline::Linearized, ChangeBaseline::Raw] {
            let fast = mlmoc(&st, &cands, Reference::Rows(&q), baseline).unwrap();
            assert_scores_close(&fast.scores, &brute_mlmoc(&st, &cands, &q, baseline), 1e-8);
            for distance in [Distance::L2, Distance::L1] {
                let fast = emoc(&st, &cands, Reference::Rows(&q), baseline, distance).unwrap();
                assert_scores_close(&fast.scores, &brute_emoc(&st, &cands, &q, baseline, distance), 1e-8);
            }
        }
        let fast = eer_lin(&st, &cands, Reference::Rows(&q)).unwrap();
        assert_scores_close(&fast.scores, &brute_eer(&st, &cands, &q), 1e-8);

        // the default reference is the candidate set itself
        let own = mlmoc(&st, &cands, Reference::Candidates, ChangeBaseline::Linearized).unwrap();
        assert_scores_close(&own.scores, &brute_mlmoc(&st, &cands, &cands, ChangeBaseline::Linearized), 1e-8);
    }
}

#[test]
fn three_candidate_toy_argmax_matches_brute_force() {
    let labeled = Matrix::from_rows(&[
        vec![-1.0, -0.8],
        vec![-0.7, -1.2],
        vec![1.1, 0.9],
        vec![0.8, 1.3],
    ])
    .unwrap();
    let targets = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
    let params = net(&[2, 32, 2], Activation::Relu, 42);
    let st = state(&params, labeled, targets);
    let cands = Matrix::from_rows(&[vec![0.1, -0.2], vec![2.5, -2.0], vec![-0.9, -1.0]]).unwrap();
    let fast = mlmoc(&st, &cands, Reference::Candidates, ChangeBaseline::Linearized).unwrap();
    let brute = brute_mlmoc(&st, &cands, &cands, ChangeBaseline::Linearized);
    assert_eq!(fast.argmax_index, argmax(&brute));
    assert_scores_close(&fast.scores, &brute, 1e-8);
}

#[test]
fn no_op_candidate_scores_zero() {
    // f(x) = (x, 0) exactly, so x' = 1 has raw output equal to its pseudo-label
    let cfg = MlpConfig::new(vec![1, 2], Activation::Identity);
    let params = MlpParams::from_flat(&cfg, &[1.0, 0.0, 0.0, 0.0]).unwrap();
    let x = Matrix::from_rows(&[vec![2.0]]).unwrap();
    let fx = forward(&params, &x).unwrap();
    let st = state(&params, x, fx);
    let cand = Matrix::from_rows(&[vec![1.0], vec![-0.5]]).unwrap();
    assert_eq!(forward(&params, &cand).unwrap().row(0), &[1.0, 0.0]);
    let res = mlmoc(&st, &cand, Reference::Candidates, ChangeBaseline::Linearized).unwrap();
    assert!(!res.degenerate[0]);
    assert_eq!(res.scores[0], 0.0);
    assert!(res.scores[1] > 0.0);
}

#[test]
fn duplicate_candidate_is_degenerate() {
    let (st, cands, q) = toy(10, 3, 4, 21);
    let with_dup = cands.vstack(&Matrix::row_vector(st.inputs().row(3))).unwrap();
    let res = mlmoc(&st, &with_dup, Reference::Rows(&q), ChangeBaseline::Linearized).unwrap();
    assert!(res.degenerate[4]);
    assert_eq!(res.scores[4], 0.0);
    assert_eq!(res.degenerate_count(), 1);
    let e = emoc(&st, &with_dup, Reference::Rows(&q), ChangeBaseline::Linearized, Distance::L2).unwrap();
    assert_eq!(e.scores[4], 0.0);
    let eer = eer_lin(&st, &with_dup, Reference::Rows(&q)).unwrap();
    let current = predict_lin(&st, &q).unwrap();
    let unchanged: f64 = current.row_iter().map(|r| entropy(&softmax(r))).sum();
    assert!((eer.scores[4] + unchanged).abs() <= 1e-12 * unchanged);
}

#[test]
fn emoc_equals_mlmoc_for_one_class() {
    let (st, cands, q) = toy(15, 1, 8, 4);
    for baseline in [ChangeBaseline::Linearized, ChangeBaseline::Raw] {
        let a = mlmoc(&st, &cands, Reference::Rows(&q), baseline).unwrap();
        let b = emoc(&st, &cands, Reference::Rows(&q), baseline, Distance::L2).unwrap();
        assert_eq!(a.scores, b.scores);
    }
}

#[test]
fn emoc_with_equal_logits_averages_label_scores() {
    let cfg = MlpConfig::new(vec![4, 32, 3], Activation::Relu).with_seed(8);
    let mut params = ntkal::net::init(&cfg).unwrap();
    let last = params.layers_mut().last_mut().unwrap();
    last.weights = Matrix::zeros(32, 3);
    last.bias = vec![0.0; 3];
    let mut r = rng(8);
    let st = state(&params, uniform(10, 4, &mut r), one_hot_rows(10, 3, &mut r));
    let cands = uniform(5, 4, &mut r);
    let q = uniform(6, 4, &mut r);
    let res = emoc(&st, &cands, Reference::Rows(&q), ChangeBaseline::Linearized, Distance::L2).unwrap();
    let base = predict_lin(&st, &q).unwrap();
    for j in 0..5 {
        let avg: f64 = (0..3)
            .map(|y| change(&base, &direct_augmented_predict(&st, cands.row(j), &unit(3, y), &q).unwrap(), Distance::L2))
            .sum::<f64>()
            / 3.0;
        assert!(rel_scalar(res.scores[j], avg) <= 1e-8);
    }
}

#[test]
fn confident_emoc_agrees_with_mlmoc() {
    // β = 0 relu nets are positively homogeneous, so scaling inputs scales
    // the logit gaps until the softmax is one-hot to within 1e-12
    let cfg = MlpConfig::new(vec![4, 64, 3], Activation::Relu).with_beta(0.0).with_seed(12);
    let params = ntkal::net::init(&cfg).unwrap();
    let mut r = rng(12);
    let st = state(&params, uniform(10, 4, &mut r), one_hot_rows(10, 3, &mut r));
    let raw = uniform(6, 4, &mut r);
    let f = forward(&params, &raw).unwrap();
    let scale: Vec<f64> = f
        .row_iter()
        .map(|row| {
            let mut s = row.to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            40.0 / (s[0] - s[1])
        })
        .collect();
    let cands = Matrix::from_fn(6, 4, |i, j| raw[(i, j)] * scale[i]);
    let fc = forward(&params, &cands).unwrap();
    for row in fc.row_iter() {
        let p = softmax(row);
        assert!(1.0 - p[argmax(row)] <= 1e-12);
    }
    let a = mlmoc(&st, &cands, Reference::Candidates, ChangeBaseline::Linearized).unwrap();
    let b = emoc(&st, &cands, Reference::Candidates, ChangeBaseline::Linearized, Distance::L2).unwrap();
    assert_scores_close(&b.scores, &a.scores, 1e-9);
}

#[test]
fn eer_of_maximally_uncertain_reference_is_minus_ln2() {
    // f ≡ 0 on a linear net: Θ(x, y) = x·y/3, so a reference point orthogonal
    // to both the labeled point and the candidate keeps outputs (0, 0)
    let cfg = MlpConfig::new(vec![3, 2], Activation::Identity).with_beta(0.0);
    let params = MlpParams::zeros(&cfg).unwrap();
    let st = state(
        &params,
        Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
        Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
    );
    let cand = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
    let q = Matrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
    let res = eer_lin(&st, &cand, Reference::Rows(&q)).unwrap();
    assert!((res.scores[0] + std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn naive_oracle_edge_cases() {
    let (st, cands, q) = toy(8, 2, 2, 31);
    let x = st.inputs().clone();
    let y = st.targets().clone();
    let cand = (cands.row(0), &[1.0, 0.0][..]);
    let zero = TrainConfig { epochs: 0, ..TrainConfig::default() };
    assert_eq!(
        naive_sgd_oracle(st.network(), &x, &y, cand, &zero, &q).unwrap(),
        forward(st.network(), &q).unwrap()
    );
    let cfg = TrainConfig { epochs: 5, minibatch_size: 3, shuffle_seed: 9, ..TrainConfig::default() };
    let a = naive_sgd_oracle(st.network(), &x, &y, cand, &cfg, &q).unwrap();
    let b = naive_sgd_oracle(st.network(), &x, &y, cand, &cfg, &q).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, forward(st.network(), &q).unwrap());
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn kernel_lookahead_tracks_real_retraining() {
    let mut correlations = Vec::new();
    for seed in 0..10u64 {
        let data = gen_two_gaussians(40, 2.0, seed).unwrap();
        let mut r = rng(seed);
        let labeled: Vec<usize> = rand::seq::index::sample(&mut r, data.len(), 10).into_vec();
        let lab = data.subset(&labeled);
        let cfg = MlpConfig::new(vec![2, 512, 2], Activation::Relu).with_seed(seed);
        let init = ntkal::net::init(&cfg).unwrap();
        let fit = TrainConfig { learning_rate: 0.5, epochs: 400, minibatch_size: 16, ..TrainConfig::default() };
        let params = train_sgd(&init, &lab.inputs, &lab.one_hot, &fit).unwrap();
        let st = state(&params, lab.inputs.clone(), lab.one_hot.clone());
        let q = uniform(30, 2, &mut r);
        let q = Matrix::from_fn(30, 2, |i, j| 3.0 * q[(i, j)]);
        let base_lin = predict_lin(&st, &q).unwrap();
        let base_raw = forward(&params, &q).unwrap();
        let (mut kern, mut sgd) = (Vec::new(), Vec::new());
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| r.gen_range(-3.0..3.0)).collect();
            let fx = forward(&params, &Matrix::row_vector(&x)).unwrap();
            let y = unit(2, argmax(fx.row(0)));
            let after_lin = direct_augmented_predict(&st, &x, &y, &q).unwrap();
            let after_sgd = naive_sgd_oracle(&params, &lab.inputs, &lab.one_hot, (&x, &y), &fit, &q).unwrap();
            kern.extend(after_lin.sub(&base_lin).unwrap().into_vec());
            sgd.extend(after_sgd.sub(&base_raw).unwrap().into_vec());
        }
        correlations.push(pearson(&kern, &sgd));
    }
    let mean = correlations.iter().sum::<f64>() / correlations.len() as f64;
    assert!(mean > 0.5, "correlations {correlations:?}");
}
