#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::{SeedTree, Substream};

fn sq() -> LossSpec {
    LossSpec::new(ModelKind::SquaredError, 0.0)
}

fn one(a: f64, b: f64) -> LocalDataset {
    LocalDataset::new(vec![Sample::new(vec![a], b)]).unwrap()
}

fn random_dataset(rng: &mut StreamRng, n: usize, f: usize, kind: ModelKind) -> LocalDataset {
    let samples = (0..n)
        .map(|_| {
            let input: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
            let label = match kind {
                ModelKind::Logistic => f64::from(rng.random_range(0..2u8)),
                ModelKind::Softmax { classes } | ModelKind::Mlp { classes, .. } => {
                    rng.random_range(0..classes) as f64
                }
                _ => rng.random_range(-2.0..2.0),
            };
            Sample::new(input, label)
        })
        .collect();
    LocalDataset::new(samples).unwrap()
}

#[test]
fn squared_error_examples() {
    assert_eq!(local_loss(&[2.0], &one(1.0, 2.0), &sq()).unwrap(), 0.0);
    assert_eq!(local_loss(&[0.0], &one(1.0, 2.0), &sq()).unwrap(), 4.0);
    let ds = one(1.0, 0.0);
    let g = loss_gradient(&[1.0], &ds.all(), &sq()).unwrap();
    assert_eq!(&g[..], &[2.0]);
}

#[test]
fn loss_errors() {
    let ds = one(1.0, 2.0);
    assert_eq!(
        local_loss(&[1.0, 2.0], &ds, &sq()),
        Err(FlError::DimensionMismatch {
            expected: 1,
            actual: 2
        })
    );
    assert_eq!(LocalDataset::new(Vec::new()), Err(FlError::EmptyDataset));
    assert_eq!(loss_gradient(&[1.0], &[], &sq()), Err(FlError::EmptyBatch));
}

#[test]
fn logistic_matches_scalar_loop() {
    let mut rng = SeedTree::new(3).stream(Substream::Data, 0, 0);
    let ds = random_dataset(&mut rng, 10, 4, ModelKind::Logistic);
    let theta: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let spec = LossSpec::new(ModelKind::Logistic, 0.1);

    let mut oracle = 0.0;
    for s in ds.samples() {
        let mut z = 0.0;
        for k in 0..4 {
            z += theta[k] * s.input[k];
        }
        let p = 1.0 / (1.0 + (-z).exp());
        oracle += -(s.label * p.ln() + (1.0 - s.label) * (1.0 - p).ln());
    }
    oracle /= 10.0;
    let mut reg = 0.0;
    for t in &theta {
        reg += t * t;
    }
    oracle += 0.1 * reg / 2.0;

    let got = local_loss(&theta, &ds, &spec).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

fn finite_difference_check(spec: LossSpec, f: usize, seed: u64) {
    let mut rng = SeedTree::new(seed).stream(Substream::Data, 0, 0);
    for trial in 0..100 {
        let ds = random_dataset(&mut rng, 5, f, spec.kind);
        let d = spec.param_dim(f);
        let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = ds.all();
        let grad = loss_gradient(&theta, &batch, &spec).unwrap();
        let h = 1e-6;
        for k in 0..d {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (batch_loss(&plus, &batch, &spec).unwrap()
                - batch_loss(&minus, &batch, &spec).unwrap())
                / (2.0 * h);
            let tol = 1e-5 * fd.abs().max(1.0);
            assert!(
                (grad[k] - fd).abs() <= tol,
                "{} trial {trial} coord {k}: {} vs {fd}",
                spec.kind.name(),
                grad[k]
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    finite_difference_check(LossSpec::new(ModelKind::SquaredError, 0.0), 3, 1);
    finite_difference_check(LossSpec::new(ModelKind::QuadraticSynthetic, 0.05), 3, 2);
    finite_difference_check(LossSpec::new(ModelKind::Logistic, 0.01), 4, 3);
    finite_difference_check(LossSpec::new(ModelKind::Softmax { classes: 3 }, 0.01), 3, 4);
    finite_difference_check(
        LossSpec::new(ModelKind::Mlp {
            hidden: 4,
            classes: 3,
        }, 0.001),
        3,
        5,
    );
}

#[test]
fn sgd_step_examples() {
    let spec = LossSpec::new(ModelKind::QuadraticSynthetic, 0.0);
    // f = ½θ²
    let ds = one(1.0, 0.0);
    let next = sgd_step(&[1.0], &ds.all(), 1.0, &spec).unwrap();
    assert_eq!(&next[..], &[0.0]);
    // zero gradient at the minimizer
    let ds = one(1.0, 3.0);
    let next = sgd_step(&[3.0], &ds.all(), 0.5, &spec).unwrap();
    assert_eq!(&next[..], &[3.0]);
    assert!(sgd_step(&[3.0], &ds.all(), 0.0, &spec).is_err());
}

#[test]
fn sgd_step_composes_like_manual_replay() {
    let spec = LossSpec::new(ModelKind::QuadraticSynthetic, 0.0);
    let ds = LocalDataset::new(vec![
        Sample::new(vec![1.0, 0.5], 1.0),
        Sample::new(vec![-0.5, 2.0], 0.0),
    ])
    .unwrap();
    let batch = ds.all();
    let two = sgd_step(&sgd_step(&[0.2, -0.1], &batch, 0.1, &spec).unwrap(), &batch, 0.1, &spec)
        .unwrap();
    // manual: θ ← θ − η · mean((aᵀθ − b) a), twice
    let mut theta = [0.2, -0.1];
    for _ in 0..2 {
        let mut g = [0.0, 0.0];
        for s in ds.samples() {
            let r = s.input[0] * theta[0] + s.input[1] * theta[1] - s.label;
            g[0] += r * s.input[0] / 2.0;
            g[1] += r * s.input[1] / 2.0;
        }
        theta[0] -= 0.1 * g[0];
        theta[1] -= 0.1 * g[1];
    }
    assert_eq!(&two[..], &theta);
}

#[test]
fn non_finite_gradient_aborts() {
    let ds = one(f64::INFINITY, 1.0);
    assert!(matches!(
        sgd_step(&[1.0], &ds.all(), 0.1, &sq()),
        Err(FlError::NonFiniteGradient { .. })
    ));
}

#[test]
fn local_train_edge_cases() {
    let seeds = SeedTree::new(5);
    let spec = LossSpec::new(ModelKind::QuadraticSynthetic, 0.0);
    let mut rng = seeds.stream(Substream::Data, 0, 0);
    let ds = random_dataset(&mut rng, 20, 3, spec.kind);
    let theta0 = [0.1, 0.2, 0.3];
    let mut schedule = TrainingSchedule {
        local_steps: 0,
        batch_size: 4,
        total_steps: 10,
        rate: LearningRate::Constant(0.1),
    };
    let out = local_train(&theta0, &ds, &spec, &schedule, 0, &mut seeds.stream(Substream::Batch, 1, 0))
        .unwrap();
    assert_eq!(&out[..], &theta0);

    // E = 1 equals one sgd_step on the batch the sampler draws.
    schedule.local_steps = 1;
    let out = local_train(&theta0, &ds, &spec, &schedule, 0, &mut seeds.stream(Substream::Batch, 1, 0))
        .unwrap();
    let mut rng = seeds.stream(Substream::Batch, 1, 0);
    let mut sampler = MinibatchSampler::new(ds.len(), 4, &mut rng).unwrap();
    let idx = sampler.next_batch(&mut rng).to_vec();
    let manual = sgd_step(&theta0, &ds.batch(&idx), 0.1, &spec).unwrap();
    assert_eq!(out, manual);

    // E = 5 replays bit-identically.
    schedule.local_steps = 5;
    let a = local_train(&theta0, &ds, &spec, &schedule, 0, &mut seeds.stream(Substream::Batch, 2, 3))
        .unwrap();
    let b = local_train(&theta0, &ds, &spec, &schedule, 0, &mut seeds.stream(Substream::Batch, 2, 3))
        .unwrap();
    assert_eq!(
        a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn sampler_covers_epoch_without_replacement() {
    let mut rng = SeedTree::new(1).stream(Substream::Batch, 0, 0);
    let mut sampler = MinibatchSampler::new(12, 4, &mut rng).unwrap();
    let mut seen: Vec<usize> = Vec::new();
    for _ in 0..3 {
        seen.extend_from_slice(sampler.next_batch(&mut rng));
    }
    seen.sort_unstable();
    assert_eq!(seen, (0..12).collect::<Vec<_>>());
}

#[test]
fn global_loss_examples() {
    let spec = LossSpec::new(ModelKind::QuadraticSynthetic, 0.01);
    let mut rng = SeedTree::new(8).stream(Substream::Data, 0, 0);
    let parts: Vec<LocalDataset> = [4, 7, 11]
        .iter()
        .map(|&n| random_dataset(&mut rng, n, 3, spec.kind))
        .collect();
    let theta = [0.3, -0.2, 0.5];

    let single = global_loss(&theta, &parts[..1], &[1.0], &spec).unwrap();
    assert_eq!(single, local_loss(&theta, &parts[0], &spec).unwrap());

    let same = vec![parts[1].clone(), parts[1].clone()];
    let l = global_loss(&theta, &same, &[0.3, 0.7], &spec).unwrap();
    assert!((l - local_loss(&theta, &parts[1], &spec).unwrap()).abs() < 1e-12);

    let p = size_weights(&parts);
    let pooled = LocalDataset::pooled(&parts).unwrap();
    let lhs = global_loss(&theta, &parts, &p, &spec).unwrap();
    let rhs = local_loss(&theta, &pooled, &spec).unwrap();
    assert!((lhs - rhs).abs() < 1e-12);

    assert!(matches!(
        global_loss(&theta, &parts, &[0.5, 0.5, 0.5], &spec),
        Err(FlError::InvalidWeights { .. })
    ));
}

#[test]
fn full_batch_descent_is_monotone_for_small_steps() {
    let spec = LossSpec::new(ModelKind::QuadraticSynthetic, 0.0);
    let mut rng = SeedTree::new(21).stream(Substream::Data, 0, 0);
    let ds = random_dataset(&mut rng, 30, 4, spec.kind);
    // L = λ_max(AᵀA / n) ≤ trace
    let trace: f64 = ds
        .samples()
        .iter()
        .map(|s| s.input.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / 30.0;
    let eta = 1.9 / trace;
    let mut theta = ParamVector::from(vec![2.0, -1.0, 0.5, 3.0]);
    let mut prev = local_loss(&theta, &ds, &spec).unwrap();
    for _ in 0..200 {
        theta = sgd_step(&theta, &ds.all(), eta, &spec).unwrap();
        let cur = local_loss(&theta, &ds, &spec).unwrap();
        assert!(cur <= prev + 1e-15);
        prev = cur;
    }
}

#[test]
fn diminishing_rate_follows_gamma_rule() {
    let rate = LearningRate::diminishing(4.0, 1.0, 5);
    assert_eq!(rate, LearningRate::Diminishing { mu: 1.0, gamma: 32.0 });
    assert_eq!(rate.at(0), 2.0 / 32.0);
    let rate = LearningRate::diminishing(1.0, 1.0, 20);
    assert_eq!(rate.at(4), 2.0 / 24.0);
}

proptest! {
    #[test]
    fn operations_are_deterministic(seed in any::<u64>()) {
        let spec = LossSpec::new(ModelKind::Softmax { classes: 3 }, 0.01);
        let mut rng = SeedTree::new(seed).stream(Substream::Data, 0, 0);
        let ds = random_dataset(&mut rng, 8, 2, spec.kind);
        let theta: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = loss_gradient(&theta, &ds.all(), &spec).unwrap();
        let b = loss_gradient(&theta, &ds.all(), &spec).unwrap();
        prop_assert_eq!(a, b);
    }
}
