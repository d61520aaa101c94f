//! Estimation of the bound constants for smooth strongly convex objectives.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;

use super::BoundParams;
use crate::error::{check_dim, invalid, FlError, Result};
use crate::model::{
    local_loss, loss_gradient, LocalDataset, LossSpec, MinibatchSampler, ParamVector,
    TrainingSchedule,
};
use crate::rng::StreamRng;

/// Margin applied to the largest sampled gradient square-norm.
pub const GRAD_MARGIN: f64 = 1.2;

fn supported(spec: &LossSpec) -> Result<(f64, f64)> {
    let sup = spec
        .curvature_bound()
        .ok_or(FlError::UnsupportedLoss(spec.kind.name()))?;
    // logistic curvature vanishes far from the decision boundary
    let inf = if spec.kind.is_classifier() { 0.0 } else { sup };
    Ok((inf, sup))
}

fn second_moment(ds: &LocalDataset) -> DMatrix<f64> {
    let f = ds.input_dim();
    let mut m = DMatrix::zeros(f, f);
    for s in ds.samples() {
        let a = DVector::from_column_slice(&s.input);
        m += &a * a.transpose();
    }
    m / ds.len() as f64
}

/// `(L, μ)`: the largest smoothness and smallest strong-convexity constant over users.
pub fn smoothness_constants(datasets: &[LocalDataset], spec: &LossSpec) -> Result<(f64, f64)> {
    let (inf, sup) = supported(spec)?;
    if datasets.is_empty() {
        return Err(FlError::EmptySelection);
    }
    let mut l = f64::NEG_INFINITY;
    let mut mu = f64::INFINITY;
    for ds in datasets {
        let eig = second_moment(ds).symmetric_eigenvalues();
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
        l = l.max(sup * hi + spec.l2);
        mu = mu.min(inf * lo + spec.l2);
    }
    if !(mu > 0.0) {
        return Err(invalid(
            "l2",
            "objective is not strongly convex; add a ridge term or more varied inputs",
        ));
    }
    Ok((l, mu))
}

/// Minimizer of `Σ p_i f_i` and its value.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimizer {
    pub theta: ParamVector,
    pub value: f64,
}

fn objective(theta: &[f64], datasets: &[&LocalDataset], weights: &[f64], spec: &LossSpec) -> Result<f64> {
    let mut v = 0.0;
    for (ds, p) in datasets.iter().zip(weights) {
        v += p * local_loss(theta, ds, spec)?;
    }
    Ok(v)
}

/// Damped Newton iterations; exact in one step for least squares.
pub fn minimizer(datasets: &[&LocalDataset], weights: &[f64], spec: &LossSpec) -> Result<Minimizer> {
    supported(spec)?;
    check_dim(datasets.len(), weights.len())?;
    let first = datasets.first().ok_or(FlError::EmptySelection)?;
    let f = first.input_dim();
    let mut theta = vec![0.0; f];
    let mut value = objective(&theta, datasets, weights, spec)?;
    for _ in 0..200 {
        let mut grad = DVector::zeros(f);
        let mut hess = DMatrix::identity(f, f) * spec.l2;
        for (ds, p) in datasets.iter().zip(weights) {
            let g = loss_gradient(&theta, &ds.all(), spec)?;
            grad += DVector::from_column_slice(&g) * *p;
            let scale = p / ds.len() as f64;
            for s in ds.samples() {
                let c = spec.curvature(&theta, &s.input).expect("supported kind") * scale;
                let a = DVector::from_column_slice(&s.input);
                hess += (&a * a.transpose()) * c;
            }
        }
        if grad.norm() <= 1e-14 * (1.0 + value.abs()) {
            break;
        }
        let chol = hess
            .cholesky()
            .ok_or(FlError::Numerical("Hessian is not positive definite"))?;
        let step = chol.solve(&grad);
        let decrease = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(x, s)| x - t * s).collect();
            let v = objective(&cand, datasets, weights, spec)?;
            if v <= value - 1e-4 * t * decrease {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, v)) = accepted else { break };
        let done = (value - v).abs() <= 1e-16 * value.abs().max(1.0);
        theta = cand;
        value = v;
        if done {
            break;
        }
    }
    Ok(Minimizer {
        theta: theta.into(),
        value,
    })
}

/// Per-iterate gradient statistics of one user.
struct GradStats {
    /// Variance of a size-`B` mini-batch gradient, sampled without replacement.
    batch_var: f64,
    /// `E‖g_B‖²`.
    expected_sq: f64,
}

fn grad_stats(theta: &[f64], ds: &LocalDataset, spec: &LossSpec, batch: usize) -> GradStats {
    let n = ds.len();
    let d = theta.len();
    let mut grads = Vec::with_capacity(n);
    let mut mean = vec![0.0; d];
    for s in ds.samples() {
        let mut g = vec![0.0; d];
        spec.accumulate_gradient(theta, s, &mut g);
        for ((gk, m), t) in g.iter_mut().zip(mean.iter_mut()).zip(theta) {
            *gk += spec.l2 * t;
            *m += *gk / n as f64;
        }
        grads.push(g);
    }
    let per_sample: f64 = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let batch_var = if n > 1 {
        per_sample / batch as f64 * (n - batch) as f64 / (n - 1) as f64
    } else {
        0.0
    };
    let mean_sq: f64 = mean.iter().map(|m| m * m).sum();
    GradStats {
        batch_var,
        expected_sq: mean_sq + batch_var,
    }
}

/// Estimates every bound constant for full-participation local SGD.
///
/// `L` and `μ` come from the data spectra, `Γ` and `θ*` from exact minimizers,
/// and `σ_i²`, `G²` from gradient statistics along a reference run of
/// `schedule` started at `theta0`.
pub fn estimate_bound_params(
    datasets: &[LocalDataset],
    weights: &[f64],
    spec: &LossSpec,
    schedule: &TrainingSchedule,
    theta0: &[f64],
    rng: &mut StreamRng,
) -> Result<BoundParams> {
    let (l, mu) = smoothness_constants(datasets, spec)?;
    crate::model::check_weights(weights)?;
    check_dim(datasets.len(), weights.len())?;
    let min_len = datasets.iter().map(LocalDataset::len).min().unwrap_or(0);
    schedule.validate(min_len)?;
    let refs: Vec<&LocalDataset> = datasets.iter().collect();
    let global = minimizer(&refs, weights, spec)?;
    let mut local_sum = 0.0;
    for (ds, p) in datasets.iter().zip(weights) {
        local_sum += p * minimizer(&[ds], &[1.0], spec)?.value;
    }
    let heterogeneity = (global.value - local_sum).max(0.0);
    let init_dist: f64 = theta0
        .iter()
        .zip(global.theta.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    let n = datasets.len();
    let mut variances = vec![0.0; n];
    let mut g_max: f64 = 0.0;
    let mut theta = ParamVector::from(theta0.to_vec());
    let mut samplers = Vec::with_capacity(n);
    for ds in datasets {
        samplers.push(MinibatchSampler::new(ds.len(), schedule.batch_size, rng)?);
    }
    for round in 0..schedule.rounds() {
        let start = round * schedule.local_steps;
        let mut next = vec![0.0; theta.len()];
        for (i, ds) in datasets.iter().enumerate() {
            let mut local = theta.clone();
            for k in 0..schedule.local_steps {
                let st = grad_stats(&local, ds, spec, schedule.batch_size);
                variances[i] = variances[i].max(st.batch_var);
                g_max = g_max.max(st.expected_sq);
                let idx = samplers[i].next_batch(rng);
                let g = loss_gradient(&local, &ds.batch(idx), spec)?;
                g_max = g_max.max(g.sq_norm());
                let eta = schedule.rate.at(start + k);
                local.iter_mut().zip(g.iter()).for_each(|(x, gk)| *x -= eta * gk);
            }
            for (acc, x) in next.iter_mut().zip(local.iter()) {
                *acc += weights[i] * x;
            }
        }
        theta = next.into();
    }
    Ok(BoundParams {
        smoothness: l,
        strong_convexity: mu,
        local_steps: schedule.local_steps,
        total_steps: schedule.total_steps,
        heterogeneity,
        grad_sq_bound: GRAD_MARGIN * g_max,
        weights: weights.to_vec(),
        variances,
        init_dist,
        lattice: None,
        ota: None,
    })
}
