use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{invalid, Result};
use crate::rng::StreamRng;

/// Step-size rule.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LearningRate {
    Constant(f64),
    /// `η_t = 2 / (μ (γ + t))`.
    Diminishing { mu: f64, gamma: f64 },
}

impl LearningRate {
    /// The diminishing rule with `γ = max{8L/μ, E}`.
    pub fn diminishing(smoothness: f64, strong_convexity: f64, local_steps: usize) -> Self {
        LearningRate::Diminishing {
            mu: strong_convexity,
            gamma: gamma(smoothness, strong_convexity, local_steps),
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LearningRate::Constant(eta) => eta,
            LearningRate::Diminishing { mu, gamma } => 2.0 / (mu * (gamma + step as f64)),
        }
    }
}

/// `γ = max{8L/μ, E}`.
pub fn gamma(smoothness: f64, strong_convexity: f64, local_steps: usize) -> f64 {
    (8.0 * smoothness / strong_convexity).max(local_steps as f64)
}

/// `E` local steps per round, mini-batch size `B`, total steps `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingSchedule {
    pub local_steps: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub rate: LearningRate,
}

impl TrainingSchedule {
    pub fn validate(&self, min_dataset: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > min_dataset {
            return Err(invalid(
                "batch_size",
                alloc::format!("must lie in [1, {min_dataset}] (smallest local dataset)"),
            ));
        }
        if self.local_steps == 0 {
            return Err(invalid("local_steps", "must be positive"));
        }
        if !self.total_steps.is_multiple_of(self.local_steps) {
            return Err(invalid(
                "total_steps",
                "must be a multiple of local_steps (synchronization indices are multiples of E)",
            ));
        }
        match self.rate {
            LearningRate::Constant(eta) if !(eta > 0.0) => {
                Err(invalid("rate", "constant learning rate must be positive"))
            }
            LearningRate::Diminishing { mu, gamma } if !(mu > 0.0 && gamma > 0.0) => {
                Err(invalid("rate", "diminishing rule needs positive mu and gamma"))
            }
            _ => Ok(()),
        }
    }

    pub fn rounds(&self) -> usize {
        self.total_steps / self.local_steps
    }
}

/// Mini-batches drawn without replacement within an epoch; reshuffled per epoch.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl MinibatchSampler {
    pub fn new(n: usize, batch: usize, rng: &mut StreamRng) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(invalid("batch_size", alloc::format!("{batch} not in [1, {n}]")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Ok(Self {
            order,
            pos: 0,
            batch,
        })
    }

    pub fn next_batch(&mut self, rng: &mut StreamRng) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        out
    }
}
