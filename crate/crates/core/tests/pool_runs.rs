mod common;

use ntkal::acquire::Strategy;
use ntkal::data::{gen_spirals, Dataset};
use ntkal::kernel::KernelState;
use ntkal::linalg::Matrix;
use ntkal::lookahead::predict_lin;
use ntkal::net::{Activation, MlpConfig, TrainConfig};
use ntkal::pool::{run_al, run_batch_al, run_sequential_al, sequential_loop, CycleRecord, RunConfig};
use ntkal::Error;

fn data() -> (Dataset, Dataset) {
    (gen_spirals(60, 0.05, 1).unwrap(), gen_spirals(50, 0.05, 2).unwrap())
}

fn config(strategy: Strategy) -> RunConfig {
    let mlp = MlpConfig::new(vec![2, 32, 2], Activation::Relu);
    let train = TrainConfig {
        learning_rate: 0.2,
        epochs: 20,
        minibatch_size: 16,
        ..TrainConfig::default()
    };
    let mut c = RunConfig::new(strategy, mlp, train);
    c.initial_labeled = 10;
    c.query_batch = 4;
    c.subset_size = 40;
    c.cycles = 3;
    c.seed = 7;
    c
}

fn without_timings(records: &[CycleRecord]) -> Vec<(usize, usize, u64, String, u64, usize)> {
    records
        .iter()
        .map(|r| {
            (
                r.cycle,
                r.labeled_size,
                r.test_accuracy.to_bits(),
                r.strategy.clone(),
                r.seed,
                r.degenerate_skipped,
            )
        })
        .collect()
}

#[test]
fn one_random_cycle_moves_exactly_k_points() {
    let (train, test) = data();
    let mut c = config(Strategy::Random);
    c.cycles = 1;
    let records = run_batch_al(&c, &train, &test).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].labeled_size, c.initial_labeled + c.query_batch);
    assert_eq!(records[0].cycle, 1);
    assert!((0.0..=1.0).contains(&records[0].test_accuracy));
}

#[test]
fn budget_grows_by_k_every_cycle() {
    let (train, test) = data();
    for strategy in [Strategy::Mlmoc, Strategy::Entropy, Strategy::Margin, Strategy::Emoc, Strategy::Eer] {
        let c = config(strategy);
        let records = run_al(&c, &train, &test).unwrap();
        assert_eq!(records.len(), c.cycles);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.labeled_size, c.initial_labeled + (i + 1) * c.query_batch);
            assert_eq!(r.strategy, strategy.name());
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let (train, test) = data();
    for sequential in [false, true] {
        let mut c = config(Strategy::Mlmoc);
        c.sequential = sequential;
        let a = run_al(&c, &train, &test).unwrap();
        let b = run_al(&c, &train, &test).unwrap();
        assert_eq!(without_timings(&a), without_timings(&b));
    }
}

#[test]
fn random_runs_are_isolated_from_other_strategies() {
    let (train, test) = data();
    let first = run_batch_al(&config(Strategy::Random), &train, &test).unwrap();
    run_batch_al(&config(Strategy::Mlmoc), &train, &test).unwrap();
    run_batch_al(&config(Strategy::Entropy), &train, &test).unwrap();
    let again = run_batch_al(&config(Strategy::Random), &train, &test).unwrap();
    assert_eq!(without_timings(&first), without_timings(&again));
}

#[test]
fn single_query_sequential_equals_batch() {
    let (train, test) = data();
    let mut c = config(Strategy::Mlmoc);
    c.query_batch = 1;
    c.cycles = 4;
    let batch = run_batch_al(&c, &train, &test).unwrap();
    c.sequential = true;
    let seq = run_sequential_al(&c, &train, &test).unwrap();
    let strip = |r: &[CycleRecord]| -> Vec<(usize, u64)> {
        r.iter().map(|x| (x.labeled_size, x.test_accuracy.to_bits())).collect()
    };
    assert_eq!(strip(&batch), strip(&seq));
}

#[test]
fn sequential_state_matches_cold_rebuild() {
    let (train, test) = data();
    let mut c = config(Strategy::Mlmoc);
    c.sequential = true;
    c.retrain_every = 1000;
    c.query_batch = 5;
    let (records, state) = sequential_loop(&c, &train, &test).unwrap();
    let state = state.expect("no retraining happened");
    assert_eq!(state.len(), records.last().unwrap().labeled_size);
    let cold = KernelState::build(
        state.kernel().clone(),
        state.network(),
        state.inputs().clone(),
        state.targets().clone(),
        state.options().clone(),
    )
    .unwrap();
    let grid = Matrix::from_fn(60, 2, |i, j| ((i * 7 + j * 13) % 23) as f64 / 11.5 - 1.0);
    let a = predict_lin(&state, &grid).unwrap();
    let b = predict_lin(&cold, &grid).unwrap();
    assert!(common::rel(&a, &b) <= 1e-6, "{:e}", common::rel(&a, &b));
}

#[test]
fn duplicates_are_flagged_and_skipped() {
    // five points repeated many times: most candidates duplicate labeled rows
    let base = [[0.9, 0.1], [-0.5, 0.7], [0.2, -0.8], [-0.6, -0.4], [0.4, 0.5]];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for rep in 0..30 {
        for (i, p) in base.iter().enumerate() {
            rows.push(p.to_vec());
            labels.push(i % 2);
        }
        rows.push(vec![(rep as f64 * 0.37).sin(), (rep as f64 * 0.91).cos()]);
        labels.push(rep % 2);
    }
    let train = Dataset::new("dups", Matrix::from_rows(&rows).unwrap(), labels, 2).unwrap();
    let (_, test) = data();
    let mut c = config(Strategy::Mlmoc);
    c.initial_labeled = 20;
    c.subset_size = 60;
    c.query_batch = 5;
    c.cycles = 2;
    let records = run_batch_al(&c, &train, &test).unwrap();
    assert!(records.iter().any(|r| r.degenerate_skipped > 0));
    assert_eq!(records.last().unwrap().labeled_size, 30);
}

#[test]
fn config_contract_and_divergence_context() {
    let (train, test) = data();
    let mut c = config(Strategy::Random);
    c.subset_size = 2;
    assert!(matches!(run_batch_al(&c, &train, &test), Err(Error::Contract(_))));
    let mut c = config(Strategy::Random);
    c.sequential = true;
    assert!(run_al(&c, &train, &test).is_err());

    let mut c = config(Strategy::Random);
    c.train.learning_rate = 1e4;
    let err = run_batch_al(&c, &train, &test).unwrap_err();
    assert!(matches!(err, Error::InCycle { cycle: 0, .. }), "{err}");
}

#[test]
fn other_kernel_strategies_run() {
    let (train, test) = data();
    for strategy in [Strategy::MlmocRaw, Strategy::MlmocInf, Strategy::Naive, Strategy::OneStep] {
        let mut c = config(strategy);
        c.cycles = 1;
        c.subset_size = 12;
        c.naive_epochs = 2;
        let r = run_batch_al(&c, &train, &test).unwrap();
        assert_eq!(r[0].labeled_size, 14);
    }
}
