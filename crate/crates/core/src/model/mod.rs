//! Parameter vectors, local datasets, loss objectives and local SGD.

mod loss;
mod param;
mod schedule;

pub use loss::{LossSpec, ModelKind};
pub(crate) use loss::log_sum_exp;
pub use param::ParamVector;
pub use schedule::{gamma as schedule_gamma, LearningRate, MinibatchSampler, TrainingSchedule};

use alloc::vec::Vec;

use crate::error::{check_dim, FlError, Result};
use crate::rng::StreamRng;

/// One labeled pair `(a, b)`. Class labels are stored as small non-negative integers.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(input: Vec<f64>, label: f64) -> Self {
        Self { input, label }
    }
}

/// A user's private dataset. Never empty; all inputs share one dimension.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LocalDataset {
    samples: Vec<Sample>,
    input_dim: usize,
}

impl LocalDataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or(FlError::EmptyDataset)?;
        let input_dim = first.input.len();
        for s in &samples {
            check_dim(input_dim, s.input.len())?;
        }
        Ok(Self { samples, input_dim })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    /// Every sample, as a batch.
    pub fn all(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Vec<&Sample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Concatenation of several datasets.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a LocalDataset>) -> Result<Self> {
        let samples = parts
            .into_iter()
            .flat_map(|d| d.samples.iter().cloned())
            .collect();
        Self::new(samples)
    }
}

/// `(1/n) Σ ℒ(a, b; θ) + λ‖θ‖²/2` over the whole dataset.
pub fn local_loss(theta: &[f64], ds: &LocalDataset, spec: &LossSpec) -> Result<f64> {
    batch_loss(theta, &ds.all(), spec)
}

/// Regularized mean loss over an explicit batch.
pub fn batch_loss(theta: &[f64], batch: &[&Sample], spec: &LossSpec) -> Result<f64> {
    if batch.is_empty() {
        return Err(FlError::EmptyBatch);
    }
    check_dim(spec.param_dim(batch[0].input.len()), theta.len())?;
    let mut total = 0.0;
    for s in batch {
        total += spec.sample_loss(theta, s);
    }
    Ok(total / batch.len() as f64 + spec.regularizer(theta))
}

/// Gradient of the regularized loss restricted to `batch`.
pub fn loss_gradient(theta: &[f64], batch: &[&Sample], spec: &LossSpec) -> Result<ParamVector> {
    if batch.is_empty() {
        return Err(FlError::EmptyBatch);
    }
    check_dim(spec.param_dim(batch[0].input.len()), theta.len())?;
    let mut grad = alloc::vec![0.0; theta.len()];
    for s in batch {
        check_dim(batch[0].input.len(), s.input.len())?;
        spec.accumulate_gradient(theta, s, &mut grad);
    }
    let scale = 1.0 / batch.len() as f64;
    for (g, t) in grad.iter_mut().zip(theta) {
        *g = *g * scale + spec.l2 * t;
    }
    Ok(ParamVector::from(grad))
}

/// One SGD iteration `θ − η ∇f(θ; batch)`.
pub fn sgd_step(theta: &[f64], batch: &[&Sample], eta: f64, spec: &LossSpec) -> Result<ParamVector> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(crate::error::invalid("eta", "learning rate must be positive and finite"));
    }
    let grad = loss_gradient(theta, batch, spec)?;
    if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(FlError::NonFiniteGradient { index, value });
    }
    Ok(theta.iter().zip(grad.iter()).map(|(t, g)| t - eta * g).collect())
}

/// `E` local SGD steps starting from the global model at global step `start_step`.
///
/// `rng` must be the `(round, user)` batch substream so mini-batches replay exactly.
pub fn local_train(
    theta_global: &[f64],
    ds: &LocalDataset,
    spec: &LossSpec,
    schedule: &TrainingSchedule,
    start_step: usize,
    rng: &mut StreamRng,
) -> Result<ParamVector> {
    let mut theta = ParamVector::from(theta_global.to_vec());
    if schedule.local_steps == 0 {
        return Ok(theta);
    }
    let mut sampler = MinibatchSampler::new(ds.len(), schedule.batch_size, rng)?;
    for k in 0..schedule.local_steps {
        let idx = sampler.next_batch(rng);
        let batch = ds.batch(idx);
        theta = sgd_step(&theta, &batch, schedule.rate.at(start_step + k), spec)?;
    }
    Ok(theta)
}

/// `Σ p_i · local_loss(θ, 𝒟^i)`.
pub fn global_loss(
    theta: &[f64],
    datasets: &[LocalDataset],
    weights: &[f64],
    spec: &LossSpec,
) -> Result<f64> {
    check_weights(weights)?;
    check_dim(datasets.len(), weights.len())?;
    let mut total = 0.0;
    for (ds, p) in datasets.iter().zip(weights) {
        total += p * local_loss(theta, ds, spec)?;
    }
    Ok(total)
}

/// `p_i = n_i / Σ n_j`.
pub fn size_weights(datasets: &[LocalDataset]) -> Vec<f64> {
    let total: usize = datasets.iter().map(LocalDataset::len).sum();
    datasets
        .iter()
        .map(|d| d.len() as f64 / total as f64)
        .collect()
}

/// Weights must be non-negative and sum to one.
pub fn check_weights(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(FlError::InvalidWeights { sum });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
