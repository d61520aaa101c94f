use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::dither_rng;
use crate::testutil::{correlation, mean_se, rng};

fn update(values: &[f64]) -> ModelUpdate {
    ModelUpdate::new(values.to_vec().into(), 0, 1, 10)
}

#[test]
fn delta_encode_examples() {
    let u = delta_encode(&[1.0, 2.0], &[0.5, 2.0], 3, 5, 10).unwrap();
    assert_eq!(&u.delta[..], &[0.5, 0.0]);
    assert_eq!((u.user, u.round, u.samples), (3, 5, 10));
    let same = delta_encode(&[1.0, 2.0], &[1.0, 2.0], 0, 0, 1).unwrap();
    assert_eq!(&same.delta[..], &[0.0, 0.0]);

    let local = [0.5, -7.25, 3.0e5];
    let reference = [2.5, 0.125, -1.0];
    let u = delta_encode(&local, &reference, 0, 0, 1).unwrap();
    let back: Vec<f64> = reference.iter().zip(u.delta.iter()).map(|(r, d)| r + d).collect();
    assert_eq!(back, local);
    assert!(delta_encode(&[1.0], &[1.0, 2.0], 0, 0, 1).is_err());
}

#[test]
fn topk_examples() {
    let e = topk_sparsify(&update(&[3.0, -5.0, 1.0]), 1).unwrap();
    assert_eq!(
        e.payload,
        Payload::Sparse {
            dim: 3,
            indices: vec![1],
            values: vec![-5.0]
        }
    );
    let e = topk_sparsify(&update(&[3.0, -5.0, 1.0]), 3).unwrap();
    assert_eq!(e.reconstruct().unwrap(), vec![3.0, -5.0, 1.0]);
    assert!(topk_sparsify(&update(&[1.0]), 0).is_err());
    assert!(topk_sparsify(&update(&[1.0]), 2).is_err());
    // ties keep the lowest index
    let e = topk_sparsify(&update(&[2.0, -2.0, 2.0]), 2).unwrap();
    assert!(matches!(e.payload, Payload::Sparse { ref indices, .. } if indices == &[0, 1]));
}

#[test]
fn topk_matches_full_sort_oracle() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let d = r.random_range(1..40);
        // coarse values so ties actually occur
        let v: Vec<f64> = (0..d).map(|_| f64::from(r.random_range(-6i32..=6))).collect();
        let k = r.random_range(1..=d);
        let e = topk_sparsify(&update(&v), k).unwrap();
        let Payload::Sparse { indices, .. } = &e.payload else { panic!() };

        let mut all: Vec<(f64, usize)> = v.iter().enumerate().map(|(i, x)| (x.abs(), i)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expected: Vec<u32> = all[..k].iter().map(|p| p.1 as u32).collect();
        expected.sort();
        assert_eq!(indices, &expected);
    }
}

#[test]
fn mask_identity_and_unbiasedness() {
    let u = update(&[1.5, -2.0, 0.25, 4.0]);
    let e = mask_sparsify(&u, 1.0, &mut rng(2)).unwrap();
    assert_eq!(e.reconstruct().unwrap(), u.delta.to_vec());
    assert!(mask_sparsify(&u, 0.0, &mut rng(2)).is_err());
    assert!(mask_sparsify(&u, 1.5, &mut rng(2)).is_err());

    let trials = 100_000;
    let mut r = rng(3);
    let mut samples = (0..4).map(|_| Vec::with_capacity(trials)).collect::<Vec<_>>();
    for _ in 0..trials {
        let out = mask_sparsify(&u, 0.3, &mut r).unwrap().reconstruct().unwrap();
        for (k, v) in out.into_iter().enumerate() {
            samples[k].push(v);
        }
    }
    for (k, xs) in samples.iter().enumerate() {
        let (mean, se) = mean_se(xs);
        assert!((mean - u.delta[k]).abs() < 3.0 * se, "coord {k}: {mean} ± {se}");
    }

    let a = mask_sparsify(&u, 0.5, &mut rng(4)).unwrap();
    let b = mask_sparsify(&u, 0.5, &mut rng(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn qsgd_examples() {
    let step = 0.25;
    let e = qsgd_quantize(&update(&[2.0 * step]), step, &mut rng(5), DitherMode::Off).unwrap();
    assert_eq!(e.reconstruct().unwrap(), vec![2.0 * step]);
    assert!(qsgd_quantize(&update(&[1.0]), 0.0, &mut rng(5), DitherMode::On).is_err());

    let trials = 100_000;
    let mut r = rng(6);
    let mut outs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let q = qsgd_quantize(&update(&[step / 2.0]), step, &mut r, DitherMode::On)
            .unwrap()
            .reconstruct()
            .unwrap()[0];
        assert!(q == 0.0 || q == step, "{q}");
        outs.push(q);
    }
    let (mean, se) = mean_se(&outs);
    assert!((mean - step / 2.0).abs() < 3.0 * se);
}

#[test]
fn qsgd_error_is_uncorrelated_with_input() {
    let step = 0.5;
    let mut r = rng(7);
    let mut inputs = Vec::new();
    let mut errors = Vec::new();
    for _ in 0..100_000 {
        let v = r.random_range(-3.0..3.0);
        let q = qsgd_quantize(&update(&[v]), step, &mut r, DitherMode::On)
            .unwrap()
            .reconstruct()
            .unwrap()[0];
        inputs.push(v);
        errors.push(q - v);
    }
    assert!(correlation(&errors, &inputs).abs() < 0.01);
}

#[test]
fn uveqfed_zero_update() {
    for lat in [
        LatticeSpec::integer(0.5, 2.0).unwrap(),
        LatticeSpec::hexagonal(0.5, 2.0).unwrap(),
    ] {
        let u = update(&[0.0; 5]);
        let e = uveqfed_encode(&u, &lat, 42, DitherMode::On);
        assert_eq!(e.bit_cost, FLOAT_BITS);
        let back = uveqfed_decode(&e, &lat, 42).unwrap();
        assert_eq!(&back.delta[..], &[0.0; 5]);
    }
}

#[test]
fn uveqfed_exact_on_lattice_points_without_dither() {
    // hexagonal with ζ‖u‖ = 1 and u itself a lattice point
    let lat = LatticeSpec::hexagonal(1.0, 1.0).unwrap();
    let mut p = [0.0; 2];
    lat.point(&[1, 0], &mut p);
    let u = update(&p);
    assert!((u.delta.norm() - p[0]).abs() < 1e-15);
    let zeta = 1.0 / u.delta.norm();
    let lat = LatticeSpec::hexagonal(1.0, zeta).unwrap();
    let e = uveqfed_encode(&u, &lat, 1, DitherMode::Off);
    let back = uveqfed_decode(&e, &lat, 1).unwrap();
    for (a, b) in back.delta.iter().zip(u.delta.iter()) {
        assert!((a - b).abs() < 1e-12);
    }

    // integer lattice: u = [2, 0], ζ = 1/2 → normalized [1, 0]
    let lat = LatticeSpec::integer(1.0, 0.5).unwrap();
    let u = update(&[2.0, 0.0]);
    let e = uveqfed_encode(&u, &lat, 1, DitherMode::Off);
    assert_eq!(&uveqfed_decode(&e, &lat, 1).unwrap().delta[..], &[2.0, 0.0]);
}

#[test]
fn uveqfed_seed_mismatch_is_rejected() {
    let lat = LatticeSpec::integer(0.5, 2.0).unwrap();
    let e = uveqfed_encode(&update(&[1.0, 2.0]), &lat, 10, DitherMode::On);
    assert_eq!(
        uveqfed_decode(&e, &lat, 11),
        Err(FlError::SeedMismatch {
            expected: 10,
            actual: 11
        })
    );
}

#[test]
fn scalar_uveqfed_matches_direct_subtractive_quantizer() {
    let step = 0.3;
    let zeta = 2.0;
    let lat = LatticeSpec::integer(step, zeta).unwrap();
    let mut r = rng(8);
    for trial in 0..200 {
        let v: Vec<f64> = (0..7).map(|_| r.random_range(-1.0..1.0)).collect();
        let seed = 1000 + trial;
        let e = uveqfed_encode(&update(&v), &lat, seed, DitherMode::On);
        let got = uveqfed_decode(&e, &lat, seed).unwrap();

        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = zeta * norm;
        let mut d = dither_rng(seed);
        let expected: Vec<f64> = v
            .iter()
            .map(|x| {
                let dither = (d.random::<f64>() - 0.5) * step;
                let q = ((x / scale + dither) / step).round();
                (q * step - dither) * scale
            })
            .collect();
        assert_eq!(&got.delta[..], &expected[..]);
    }
}

#[test]
fn uveqfed_error_statistics() {
    for lat in [
        LatticeSpec::integer(1.0, 2.0).unwrap(),
        LatticeSpec::hexagonal(1.0, 2.0).unwrap(),
    ] {
        let d = 6;
        let trials = 100_000;
        let mut r = rng(9);
        let seeds = crate::rng::SeedTree::new(17);
        let mut errors = (0..d).map(|_| Vec::with_capacity(trials)).collect::<Vec<_>>();
        let mut inputs = Vec::with_capacity(trials * d);
        let mut flat_err = Vec::with_capacity(trials * d);
        let mut normalized_sq = 0.0;
        for t in 0..trials {
            let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let u = update(&v);
            let seed = seeds.dither_seed(t, 0);
            let e = uveqfed_encode(&u, &lat, seed, DitherMode::On);
            let back = uveqfed_decode(&e, &lat, seed).unwrap();
            let scale2 = (lat.zeta() * u.delta.norm()).powi(2);
            for k in 0..d {
                let err = back.delta[k] - v[k];
                errors[k].push(err);
                inputs.push(v[k]);
                flat_err.push(err);
                normalized_sq += err * err / scale2;
            }
        }
        for (k, xs) in errors.iter().enumerate() {
            let (mean, se) = mean_se(xs);
            assert!(mean.abs() < 4.0 * se, "{:?} coord {k}: {mean} ± {se}", lat.kind());
        }
        assert!(correlation(&flat_err, &inputs).abs() < 0.01);
        let per_dim = normalized_sq / (trials * d) as f64;
        let rel = (per_dim - lat.normalized_second_moment()).abs() / lat.normalized_second_moment();
        assert!(rel < 0.05, "{:?}: {per_dim}", lat.kind());
    }
}

#[test]
fn dp_examples() {
    let dp = DpSpec {
        epsilon: 0.5,
        delta: 0.01,
        exposures: 1,
        clip: 1.0,
        min_samples: 100,
    };
    let expected = 4.0 * (2.0 * 125.0f64.ln()).sqrt() / (0.5 * 100.0);
    assert!((dp.sigma() - expected).abs() < 1e-15);
    assert!((dp.sigma() - 0.2486).abs() < 1e-4);

    let u = update(&[0.3, -0.4]);
    let e = dp_gaussianize(&u, &dp, &mut rng(1), NoiseMode::Off).unwrap();
    assert_eq!(e.reconstruct().unwrap(), vec![0.3, -0.4]);

    let u = update(&[3.0, 4.0]);
    let e = dp_gaussianize(&u, &dp, &mut rng(1), NoiseMode::Off).unwrap();
    let out = e.reconstruct().unwrap();
    assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
    assert!(matches!(e.payload, Payload::Noised { sigma, .. } if sigma == dp.sigma()));

    let bad = DpSpec { epsilon: 1.0, ..dp };
    assert!(dp_gaussianize(&u, &bad, &mut rng(1), NoiseMode::On).is_err());
}

#[test]
fn dp_noise_has_requested_scale() {
    let dp = DpSpec {
        epsilon: 0.5,
        delta: 0.01,
        exposures: 1,
        clip: 1.0,
        min_samples: 100,
    };
    let u = update(&vec![0.0; 100_000]);
    let out = dp_gaussianize(&u, &dp, &mut rng(2), NoiseMode::On)
        .unwrap()
        .reconstruct()
        .unwrap();
    let var = out.iter().map(|x| x * x).sum::<f64>() / out.len() as f64;
    assert!((var.sqrt() / dp.sigma() - 1.0).abs() < 0.01);
}

#[test]
fn topk_cost_grows_with_k() {
    let v: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
    let u = update(&v);
    let mut prev = 0;
    for k in 1..=50 {
        let c = topk_sparsify(&u, k).unwrap().bit_cost;
        assert!(c >= prev);
        prev = c;
    }
}

#[test]
fn quantizer_cost_shrinks_with_step() {
    let mut r = rng(12);
    let v: Vec<f64> = (0..4000).map(|_| r.random_range(-1.0..1.0)).collect();
    let u = update(&v);
    let mut prev = u64::MAX;
    for step in [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0] {
        let c = qsgd_quantize(&u, step, &mut rng(13), DitherMode::On).unwrap().bit_cost;
        assert!(c <= prev, "step {step}: {c} > {prev}");
        prev = c;
    }
}

#[test]
fn entropy_bits_examples() {
    assert_eq!(entropy_bits([1, 1, 1, 1]), 0);
    assert_eq!(entropy_bits([0, 1, 0, 1]), 4);
    assert_eq!(entropy_bits([0, 1, 2, 3]), 8);
    assert_eq!(entropy_bits(Vec::<i64>::new()), 0);
}

proptest! {
    #[test]
    fn encoders_are_deterministic(seed in any::<u64>(), v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let u = update(&v);
        let lat = LatticeSpec::hexagonal(0.4, 2.0).unwrap();
        prop_assert_eq!(
            uveqfed_encode(&u, &lat, seed, DitherMode::On),
            uveqfed_encode(&u, &lat, seed, DitherMode::On)
        );
        prop_assert_eq!(
            qsgd_quantize(&u, 0.3, &mut rng(seed), DitherMode::On).unwrap(),
            qsgd_quantize(&u, 0.3, &mut rng(seed), DitherMode::On).unwrap()
        );
    }

    #[test]
    fn sparse_indices_strictly_increase(v in prop::collection::vec(-5.0f64..5.0, 1..30), k in 1usize..30) {
        let k = k.min(v.len());
        let e = topk_sparsify(&update(&v), k).unwrap();
        let Payload::Sparse { indices, dim, .. } = e.payload else { unreachable!() };
        prop_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(indices.iter().all(|&i| (i as usize) < dim));
    }
}

