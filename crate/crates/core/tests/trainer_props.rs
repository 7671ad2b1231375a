use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sohot::data::{generate, DomainDataset, LabeledSet, ShiftSpec};
use sohot::losses::AlignmentConfig;
use sohot::model::{ModelConfig, TwoStreamModel};
use sohot::trainer::{evaluate, train, train_observed, ObjectiveKind, StatScope, TrainConfig};

fn benchmark_data(seed: u64) -> DomainDataset {
    generate(&ShiftSpec::benchmark(seed)).unwrap()
}

fn fresh_model(data: &DomainDataset, seed: u64) -> TwoStreamModel {
    TwoStreamModel::new(data.dim(), data.num_classes, ModelConfig::default(), seed).unwrap()
}

#[test]
fn loss_decreases_over_the_first_five_epochs() {
    let data = benchmark_data(0);
    let mut tcfg = TrainConfig::new(AlignmentConfig::new(3, 2, false).unwrap(), 0);
    tcfg.epochs = 5;
    tcfg.eval_every = 1;
    let out = train(
        fresh_model(&data, 0),
        &data.source_train,
        &data.target_train,
        None,
        &tcfg,
    )
    .unwrap();
    let totals: Vec<f64> = out.log.rows.iter().map(|r| r.loss.total).collect();
    assert_eq!(totals.len(), 6);
    assert!(totals[5] < totals[0], "{totals:?}");
}

#[test]
fn one_full_batch_step_decreases_the_objective() {
    let data = benchmark_data(1);
    for lr in [1e-2, 1e-3, 1e-4] {
        let align = AlignmentConfig::new(3, 3, true).unwrap().with_strengths(0.1, 0.1);
        let mut tcfg = TrainConfig::new(align, 1);
        tcfg.epochs = 1;
        tcfg.learning_rate = lr;
        tcfg.stat_scope = StatScope::FullClass;
        let out = train(
            fresh_model(&data, 1),
            &data.source_train,
            &data.target_train,
            None,
            &tcfg,
        )
        .unwrap();
        let before = out.log.rows[0].loss.total;
        let after = out.log.rows[1].loss.total;
        assert!(after < before, "lr {lr}: {before} -> {after}");
    }
}

fn random_labels(n: usize, classes: usize, dim: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabeledSet {
        inputs: DMatrix::from_fn(dim, n, |_, _| rng.random_range(-3.0..3.0)),
        labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
    }
}

#[test]
fn untrained_models_score_chance_on_random_labels() {
    let classes = 4;
    let set = random_labels(1000, classes, 2, 9);
    let chance = 1.0 / classes as f64;
    let symmetric = TwoStreamModel::zeros(2, classes, ModelConfig::default()).unwrap();
    let random = TwoStreamModel::new(2, classes, ModelConfig::default(), 3).unwrap();
    for model in [symmetric, random] {
        let acc = evaluate(&model, &set).unwrap();
        assert!((acc - chance).abs() <= 0.05, "{acc}");
    }
}

fn trajectory(data: &DomainDataset, tcfg: &TrainConfig) -> Vec<Vec<f64>> {
    let mut steps = Vec::new();
    train_observed(
        fresh_model(data, 5),
        &data.source_train,
        &data.target_train,
        None,
        tcfg,
        |info| steps.push(info.params.to_flat()),
    )
    .unwrap();
    steps
}

#[test]
fn zero_strength_alignment_follows_the_pooled_baseline() {
    let data = benchmark_data(2);
    for scope in [StatScope::MiniBatch, StatScope::FullClass] {
        let align = AlignmentConfig::new(3, 3, false).unwrap().with_strengths(0.0, 0.0);
        let mut full = TrainConfig::new(align, 5);
        full.epochs = 15;
        full.stat_scope = scope;
        let mut pooled = full.clone();
        pooled.objective = ObjectiveKind::PooledBaseline;

        let a = trajectory(&data, &full);
        let b = trajectory(&data, &pooled);
        assert_eq!(a.len(), b.len());
        assert!(!a.is_empty());
        for (step, (x, y)) in a.iter().zip(&b).enumerate() {
            let dev = x.iter().zip(y).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(dev <= 1e-12, "{scope:?} step {step}: {dev}");
        }
    }
}

#[test]
fn same_seed_gives_same_trajectory_and_log() {
    let data = benchmark_data(3);
    let align = AlignmentConfig::new(3, 2, true).unwrap().with_strengths(0.05, 0.05);
    let mut tcfg = TrainConfig::new(align, 11);
    tcfg.epochs = 4;
    tcfg.eval_every = 2;
    let first = trajectory(&data, &tcfg);
    let second = trajectory(&data, &tcfg);
    assert_eq!(first, second);
    let log = || {
        train(
            fresh_model(&data, 5),
            &data.source_train,
            &data.target_train,
            Some(&data.target_test),
            &tcfg,
        )
        .unwrap()
        .log
        .to_csv_string()
    };
    assert_eq!(log(), log());
}
