//! User selection and min-max resource block assignment.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use rand::Rng;

use crate::error::{invalid, FlError, Result};
use crate::rng::StreamRng;

mod assignment;

pub use assignment::{assign_blocks, Assignment, DelayMatrix};

/// Default exploration constant of the bandit index.
pub const DEFAULT_EXPLORE: f64 = core::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum SelectionPolicy {
    Full,
    Uniform { k: usize },
    /// Contribution- and distance-aware randomization with balance `alpha`.
    Probabilistic { k: usize, alpha: f64 },
    RoundRobin { k: usize },
    Bandit { k: usize, explore: f64 },
}

impl SelectionPolicy {
    /// Number of participants per round out of `n` users.
    pub fn participants(&self, n: usize) -> usize {
        match *self {
            Self::Full => n,
            Self::Uniform { k }
            | Self::Probabilistic { k, .. }
            | Self::RoundRobin { k }
            | Self::Bandit { k, .. } => k,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let k = self.participants(n);
        if k == 0 || k > n {
            return Err(invalid(
                "k",
                alloc::format!("participants must lie in 1..={n}, got {k}"),
            ));
        }
        match *self {
            Self::Probabilistic { alpha, .. } if !(0.0..=1.0).contains(&alpha) => {
                Err(invalid("alpha", "balance must lie in [0, 1]"))
            }
            Self::Bandit { explore, .. } if !(explore >= 0.0 && explore.is_finite()) => {
                Err(invalid("explore", "must be non-negative and finite"))
            }
            _ => Ok(()),
        }
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k > n {
        return Err(invalid(
            "k",
            alloc::format!("cannot select {k} of {n} users"),
        ));
    }
    Ok(())
}

/// A uniformly random `k`-subset of `0..n`, sorted ascending.
pub fn select_uniform(n: usize, k: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    check_k(n, k)?;
    let mut set = rand::seq::index::sample(rng, n, k).into_vec();
    set.sort_unstable();
    Ok(set)
}

/// Users `(round·k + j) mod n` for `j < k`.
pub fn select_round_robin(n: usize, k: usize, round: usize) -> Result<Vec<usize>> {
    check_k(n, k)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let start = (round % n) * k % n;
    let mut set: Vec<usize> = (0..k).map(|j| (start + j) % n).collect();
    set.sort_unstable();
    Ok(set)
}

/// Participation probabilities
/// `ρ_i = α ‖Δ_i‖ / Σ‖Δ‖ + (1 − α)(max d − d_i) / (N max d − Σ d)`.
///
/// A vanishing denominator makes the corresponding term uniform.
pub fn selection_probabilities(norms: &[f64], distances: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let n = norms.len();
    crate::error::check_dim(n, distances.len())?;
    if n == 0 {
        return Err(FlError::EmptySelection);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("alpha", "balance must lie in [0, 1]"));
    }
    if norms.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(invalid("norms", "must be non-negative and finite"));
    }
    if distances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(invalid("distances", "must be non-negative and finite"));
    }
    let uniform = 1.0 / n as f64;
    let norm_sum: f64 = norms.iter().sum();
    let d_max = distances.iter().copied().fold(0.0, f64::max);
    let d_den = n as f64 * d_max - distances.iter().sum::<f64>();
    let rho = norms
        .iter()
        .zip(distances)
        .map(|(&nm, &d)| {
            let contribution = if norm_sum > 0.0 { nm / norm_sum } else { uniform };
            let proximity = if d_den > 0.0 { (d_max - d) / d_den } else { uniform };
            alpha * contribution + (1.0 - alpha) * proximity
        })
        .collect();
    Ok(rho)
}

/// Draws `k` distinct users by successive sampling proportional to `weights`,
/// renormalizing after each draw. Once all positive weight is exhausted the
/// remaining users are drawn uniformly.
pub fn sample_without_replacement(
    weights: &[f64],
    k: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    let n = weights.len();
    check_k(n, k)?;
    let mut w = weights.to_vec();
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, wi) in w.iter().enumerate() {
                if *wi <= 0.0 {
                    continue;
                }
                acc += wi;
                pick = Some(i);
                if target < acc {
                    break;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !taken[*i]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[pick] = true;
        w[pick] = 0.0;
        out.push(pick);
    }
    out.sort_unstable();
    Ok(out)
}

/// Selection driven by [`selection_probabilities`].
pub fn select_probabilistic(
    norms: &[f64],
    distances: &[f64],
    alpha: f64,
    k: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    let rho = selection_probabilities(norms, distances, alpha)?;
    sample_without_replacement(&rho, k, rng)
}

/// Per-user transmission-time statistics.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BanditHistory {
    mean_delay: Vec<f64>,
    count: Vec<u64>,
}

impl BanditHistory {
    pub fn new(n: usize) -> Self {
        Self {
            mean_delay: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn users(&self) -> usize {
        self.count.len()
    }

    pub fn count(&self, user: usize) -> u64 {
        self.count[user]
    }

    pub fn mean_delay(&self, user: usize) -> f64 {
        self.mean_delay[user]
    }

    pub fn record(&mut self, user: usize, delay: f64) {
        self.count[user] += 1;
        let c = self.count[user] as f64;
        self.mean_delay[user] += (delay - self.mean_delay[user]) / c;
    }

    /// `−mean_delay + c √(ln t / max(1, count))`; unseen users score `+∞`.
    pub fn index(&self, user: usize, round: usize, explore: f64) -> f64 {
        if self.count[user] == 0 {
            return f64::INFINITY;
        }
        let t = round.max(1) as f64;
        let c = self.count[user].max(1) as f64;
        -self.mean_delay[user] + explore * (t.ln() / c).sqrt()
    }
}

/// The `k` users with the highest index; ties go to the lowest id.
pub fn select_bandit(
    history: &BanditHistory,
    k: usize,
    round: usize,
    explore: f64,
) -> Result<Vec<usize>> {
    let n = history.users();
    check_k(n, k)?;
    if round == 0 {
        return Err(invalid("round", "bandit rounds start at 1"));
    }
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|i| (history.index(i, round, explore), i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut set: Vec<usize> = order[..k].iter().map(|p| p.1).collect();
    set.sort_unstable();
    Ok(set)
}
