use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::error::FlError;
use crate::model::{
    loss_gradient, LearningRate, LocalDataset, LossSpec, MinibatchSampler, ModelKind, Sample,
    TrainingSchedule,
};
use crate::rng::StreamRng;
use crate::testutil::rng;

fn base() -> BoundParams {
    BoundParams {
        smoothness: 1.0,
        strong_convexity: 1.0,
        local_steps: 1,
        total_steps: 1,
        heterogeneity: 0.0,
        grad_sq_bound: 0.0,
        weights: vec![1.0],
        variances: vec![0.0],
        init_dist: 1.0,
        lattice: None,
        ota: None,
    }
}

#[test]
fn fedavg_bound_example() {
    assert_eq!(base().gamma(), 8.0);
    assert!((fedavg_bound(&base()).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn fedavg_bound_hand_evaluation() {
    let bp = BoundParams {
        smoothness: 4.0,
        strong_convexity: 0.5,
        local_steps: 5,
        total_steps: 100,
        heterogeneity: 0.3,
        grad_sq_bound: 2.0,
        weights: vec![0.25, 0.75],
        variances: vec![1.0, 2.0],
        init_dist: 3.0,
        lattice: None,
        ota: None,
    };
    // γ = max(64, 5) = 64; B̃ = 0.0625 + 1.125 + 7.2 + 128 = 136.3875
    let b = 0.0625 + 1.125 + 6.0 * 4.0 * 0.3 + 8.0 * 16.0 * 2.0;
    let expected = 4.0 / 163.0 * (2.0 * b / 0.25 + 32.0 * 3.0);
    assert!((fedavg_bound(&bp).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn bound_decreases_and_scales_as_inverse_t() {
    let mut bp = base();
    bp.variances = vec![1.0];
    let mut prev = f64::INFINITY;
    for t in [1, 2, 10, 100, 1000, 10_000] {
        let b = BoundKind::Fedavg.evaluate(&bp, t).unwrap();
        assert!(b < prev);
        prev = b;
    }
    let a = BoundKind::Fedavg.evaluate(&bp, 1_000_000).unwrap() * 1e6;
    let b = BoundKind::Fedavg.evaluate(&bp, 2_000_000).unwrap() * 2e6;
    assert!((a - b).abs() / b < 1e-5);
}

#[test]
fn uveqfed_bound_examples() {
    let mut bp = base();
    bp.variances = vec![0.4];
    bp.lattice = Some(LatticeTerms {
        subvectors: 7,
        zeta: 1e-12,
        second_moment: 1.0 / 12.0,
    });
    let plain = fedavg_bound(&bp).unwrap();
    assert!((uveqfed_bound(&bp).unwrap() - plain).abs() < 1e-12);

    bp.variances = vec![0.0];
    bp.lattice = Some(LatticeTerms {
        subvectors: 7,
        zeta: 3.0,
        second_moment: 0.08,
    });
    assert_eq!(uveqfed_bound(&bp).unwrap(), fedavg_bound(&bp).unwrap());

    let spot = BoundParams {
        local_steps: 2,
        weights: vec![1.0],
        variances: vec![0.1],
        lattice: Some(LatticeTerms {
            subvectors: 10,
            zeta: 2.0,
            second_moment: 1.0 / 12.0,
        }),
        ..base()
    };
    assert!((spot.lattice_term().unwrap() - 16.0 / 3.0).abs() < 1e-12);
    assert!(uveqfed_bound(&base()).is_err());
}

#[test]
fn cotaf_bound_examples() {
    let ota = OtaTerms {
        dim: 10,
        noise_var: 0.0,
        power: 1.0,
        users: 2,
    };
    let mut bp = BoundParams {
        grad_sq_bound: 1.0,
        ota: Some(ota),
        ..base()
    };
    assert_eq!(cotaf_bound(&bp).unwrap(), fedavg_bound(&bp).unwrap());
    bp.ota = Some(OtaTerms {
        noise_var: 1.0,
        ..ota
    });
    assert!((bp.ota_term().unwrap() - 10.0).abs() < 1e-12);
    let t2 = bp.ota_term().unwrap();
    bp.ota = Some(OtaTerms {
        noise_var: 1.0,
        users: 4,
        ..ota
    });
    assert!((bp.ota_term().unwrap() - t2 / 4.0).abs() < 1e-12);
    assert!(cotaf_bound(&base()).is_err());
}

#[test]
fn invalid_params_are_rejected() {
    let mut bp = base();
    bp.smoothness = 0.5;
    assert!(fedavg_bound(&bp).is_err());
    let mut bp = base();
    bp.heterogeneity = -1.0;
    assert!(fedavg_bound(&bp).is_err());
    let mut bp = base();
    bp.local_steps = 0;
    assert!(fedavg_bound(&bp).is_err());
}

fn scaled_identity_dataset(d: usize) -> LocalDataset {
    let s = (d as f64).sqrt();
    LocalDataset::new(
        (0..d)
            .map(|j| {
                let mut a = vec![0.0; d];
                a[j] = s;
                Sample::new(a, j as f64)
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn identity_data_gives_equal_constants() {
    let spec = LossSpec::new(ModelKind::SquaredError, 0.0);
    for d in [1, 3, 6] {
        let (l, mu) = smoothness_constants(&[scaled_identity_dataset(d)], &spec).unwrap();
        assert!((l - 2.0).abs() < 1e-12 && (mu - 2.0).abs() < 1e-12);
    }
    let ridge = LossSpec::new(ModelKind::SquaredError, 0.5);
    let (l, mu) = smoothness_constants(&[scaled_identity_dataset(2)], &ridge).unwrap();
    assert!((l - 2.5).abs() < 1e-12 && (mu - 2.5).abs() < 1e-12);
}

#[test]
fn unsupported_or_degenerate_objectives() {
    let ds = scaled_identity_dataset(2);
    let softmax = LossSpec::new(ModelKind::Softmax { classes: 3 }, 0.1);
    assert_eq!(
        smoothness_constants(std::slice::from_ref(&ds), &softmax),
        Err(FlError::UnsupportedLoss("softmax"))
    );
    let logistic = LossSpec::new(ModelKind::Logistic, 0.0);
    assert!(smoothness_constants(&[ds], &logistic).is_err());
}

fn random_dataset(r: &mut StreamRng, n: usize, d: usize, shift: f64, binary: bool) -> LocalDataset {
    LocalDataset::new(
        (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0) + shift).collect();
                let b = if binary {
                    f64::from(r.random_bool(0.5))
                } else {
                    a.iter().sum::<f64>() + r.random_range(-0.5..0.5)
                };
                Sample::new(a, b)
            })
            .collect(),
    )
    .unwrap()
}

/// Solves `M x = v` by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len();
    for c in 0..n {
        let p = (c..n).max_by(|a, b| m[*a][c].abs().total_cmp(&m[*b][c].abs())).unwrap();
        m.swap(c, p);
        v.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
            v[r] -= f * v[c];
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| m[c][k] * x[k]).sum();
        x[c] = (v[c] - s) / m[c][c];
    }
    x
}

#[test]
fn least_squares_minimizer_matches_normal_equations() {
    let mut r = rng(1);
    let spec = LossSpec::new(ModelKind::QuadraticSynthetic, 0.05);
    let a = random_dataset(&mut r, 40, 4, 0.0, false);
    let b = random_dataset(&mut r, 25, 4, 0.5, false);
    let w = [0.6, 0.4];
    let m = minimizer(&[&a, &b], &w, &spec).unwrap();
    let mut mat = vec![vec![0.0; 4]; 4];
    let mut rhs = vec![0.0; 4];
    for (ds, p) in [(&a, w[0]), (&b, w[1])] {
        let n = ds.len() as f64;
        for s in ds.samples() {
            for i in 0..4 {
                rhs[i] += p / n * s.input[i] * s.label;
                for j in 0..4 {
                    mat[i][j] += p / n * s.input[i] * s.input[j];
                }
            }
        }
    }
    for (i, row) in mat.iter_mut().enumerate() {
        row[i] += 0.05;
    }
    let x = solve(mat, rhs);
    for (u, v) in m.theta.iter().zip(&x) {
        assert!((u - v).abs() < 1e-10);
    }
}

#[test]
fn logistic_minimizer_is_stationary() {
    let mut r = rng(2);
    let spec = LossSpec::new(ModelKind::Logistic, 0.1);
    let ds = random_dataset(&mut r, 60, 3, 0.2, true);
    let m = minimizer(&[&ds], &[1.0], &spec).unwrap();
    let g = loss_gradient(&m.theta, &ds.all(), &spec).unwrap();
    assert!(g.norm() < 1e-10);
}

#[test]
fn identical_users_have_zero_heterogeneity() {
    let mut r = rng(3);
    let spec = LossSpec::new(ModelKind::QuadraticSynthetic, 0.0);
    let ds = random_dataset(&mut r, 30, 3, 0.0, false);
    let datasets = vec![ds.clone(), ds.clone(), ds];
    let schedule = TrainingSchedule {
        local_steps: 2,
        batch_size: 5,
        total_steps: 20,
        rate: LearningRate::Constant(0.05),
    };
    let w = [1.0 / 3.0; 3];
    let bp = estimate_bound_params(&datasets, &w, &spec, &schedule, &[0.0; 3], &mut rng(4)).unwrap();
    assert!(bp.heterogeneity < 1e-12);
}

#[test]
fn heterogeneous_users_have_positive_heterogeneity() {
    let mut r = rng(5);
    let spec = LossSpec::new(ModelKind::QuadraticSynthetic, 0.0);
    let datasets = vec![
        random_dataset(&mut r, 30, 3, -1.0, false),
        random_dataset(&mut r, 30, 3, 1.0, false),
    ];
    let refs: Vec<&LocalDataset> = datasets.iter().collect();
    let global = minimizer(&refs, &[0.5, 0.5], &spec).unwrap();
    let schedule = TrainingSchedule {
        local_steps: 1,
        batch_size: 3,
        total_steps: 10,
        rate: LearningRate::Constant(0.05),
    };
    let bp =
        estimate_bound_params(&datasets, &[0.5, 0.5], &spec, &schedule, &[1.0; 3], &mut rng(6))
            .unwrap();
    let direct = global.value
        - 0.5 * minimizer(&refs[..1], &[1.0], &spec).unwrap().value
        - 0.5 * minimizer(&refs[1..], &[1.0], &spec).unwrap().value;
    assert!((bp.heterogeneity - direct).abs() < 1e-12);
    assert!(bp.heterogeneity >= 0.0);
    let dist: f64 = global.theta.iter().map(|t| (1.0 - t).powi(2)).sum();
    assert!((bp.init_dist - dist).abs() < 1e-12);
}

#[test]
fn gradient_bound_dominates_sampled_norms() {
    let mut r = rng(7);
    let spec = LossSpec::new(ModelKind::QuadraticSynthetic, 0.0);
    let datasets: Vec<LocalDataset> = (0..4).map(|_| random_dataset(&mut r, 20, 3, 0.3, false)).collect();
    let schedule = TrainingSchedule {
        local_steps: 3,
        batch_size: 4,
        total_steps: 30,
        rate: LearningRate::Constant(0.1),
    };
    let w = [0.25; 4];
    let theta0 = [2.0, -2.0, 0.5];
    let bp = estimate_bound_params(&datasets, &w, &spec, &schedule, &theta0, &mut rng(8)).unwrap();
    // replay the same reference run independently and record every sampled norm
    let mut rr = rng(8);
    let mut samplers: Vec<MinibatchSampler> = datasets
        .iter()
        .map(|d| MinibatchSampler::new(d.len(), 4, &mut rr).unwrap())
        .collect();
    let mut theta = theta0.to_vec();
    let mut largest: f64 = 0.0;
    for round in 0..10 {
        let mut next = vec![0.0; 3];
        for (i, ds) in datasets.iter().enumerate() {
            let mut local = theta.clone();
            for k in 0..3 {
                let idx = samplers[i].next_batch(&mut rr);
                let g = loss_gradient(&local, &ds.batch(idx), &spec).unwrap();
                largest = largest.max(g.sq_norm());
                let eta = schedule.rate.at(round * 3 + k);
                for (x, gk) in local.iter_mut().zip(g.iter()) {
                    *x -= eta * gk;
                }
            }
            for (a, x) in next.iter_mut().zip(&local) {
                *a += 0.25 * x;
            }
        }
        theta = next;
    }
    assert!(bp.grad_sq_bound >= 1.2 * largest - 1e-12);
    assert!(bp.variances.iter().all(|v| *v > 0.0));
}

proptest! {
    #[test]
    fn prop_bounds_monotone(
        var in 0.0f64..5.0,
        het in 0.0f64..5.0,
        g2 in 0.0f64..5.0,
        zeta in 0.0f64..3.0,
        noise in 0.0f64..3.0,
        bump in 0.01f64..2.0,
        t in 1usize..10_000,
        e in 1usize..10,
    ) {
        let mk = |var: f64, het: f64, g2: f64, zeta: f64, noise: f64| BoundParams {
            smoothness: 3.0,
            strong_convexity: 0.7,
            local_steps: e,
            total_steps: t,
            heterogeneity: het,
            grad_sq_bound: g2,
            weights: vec![0.3, 0.7],
            variances: vec![var, 0.5 * var],
            init_dist: 1.5,
            lattice: Some(LatticeTerms { subvectors: 5, zeta, second_moment: 1.0 / 12.0 }),
            ota: Some(OtaTerms { dim: 8, noise_var: noise, power: 2.0, users: 2 }),
        };
        let p = mk(var, het, g2, zeta, noise);
        let f = fedavg_bound(&p).unwrap();
        let u = uveqfed_bound(&p).unwrap();
        let c = cotaf_bound(&p).unwrap();
        prop_assert!(u >= f && c >= f);
        for kind in [BoundKind::Fedavg, BoundKind::Uveqfed, BoundKind::Cotaf] {
            let now = kind.evaluate(&p, t).unwrap();
            prop_assert!(kind.evaluate(&p, t + 1).unwrap() <= now);
            for q in [
                mk(var + bump, het, g2, zeta, noise),
                mk(var, het + bump, g2, zeta, noise),
                mk(var, het, g2 + bump, zeta, noise),
                mk(var, het, g2, zeta + bump, noise),
                mk(var, het, g2, zeta, noise + bump),
            ] {
                prop_assert!(kind.evaluate(&q, t).unwrap() >= now);
            }
        }
    }
}
