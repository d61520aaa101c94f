//! Server-side combining: weighted averaging, Byzantine-robust aggregation,
//! update perturbations and clustered mixture-of-models inference.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use rand_distr::{Distribution, Normal};

use crate::encoding::ModelUpdate;
use crate::error::{check_dim, invalid, FlError, Result};
use crate::model::ParamVector;
use crate::rng::StreamRng;

mod mixture;

pub use mixture::{cluster_gate, mixture_predict, ClusterModelSet, Gate, GaussianMixture};

/// Decoded updates of one round together with their weights and reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateBatch {
    /// Delta of each participant, in ascending user order.
    pub rows: Vec<Vec<f64>>,
    pub users: Vec<usize>,
    /// Aggregation weight `p_i` of each row.
    pub weights: Vec<f64>,
    /// `θ_{t−E}`.
    pub reference: ParamVector,
}

impl UpdateBatch {
    pub fn new(
        rows: Vec<Vec<f64>>,
        users: Vec<usize>,
        weights: Vec<f64>,
        reference: ParamVector,
    ) -> Result<Self> {
        check_dim(rows.len(), users.len())?;
        check_dim(rows.len(), weights.len())?;
        for r in &rows {
            check_dim(reference.len(), r.len())?;
        }
        if weights.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(FlError::InvalidWeights {
                sum: weights.iter().sum(),
            });
        }
        Ok(Self {
            rows,
            users,
            weights,
            reference,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    fn require_rows(&self) -> Result<()> {
        if self.rows.is_empty() {
            Err(FlError::EmptySelection)
        } else {
            Ok(())
        }
    }

    /// Rows scaled by `N p_i`, for robust aggregation of weighted updates.
    pub fn weighted_rows(&self, population: usize) -> Vec<Vec<f64>> {
        let n = population as f64;
        self.rows
            .iter()
            .zip(&self.weights)
            .map(|(r, p)| r.iter().map(|v| n * p * v).collect())
            .collect()
    }

    /// Robust aggregators see either the raw rows or the weighted ones.
    pub fn robust_view(&self, weighting: RobustWeighting, population: usize) -> Self {
        match weighting {
            RobustWeighting::Unweighted => self.clone(),
            RobustWeighting::Weighted => Self {
                rows: self.weighted_rows(population),
                ..self.clone()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RobustWeighting {
    #[default]
    Unweighted,
    Weighted,
}

/// How partial participation treats the reference model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FedAvgVariant {
    /// `θ = (N/|𝒢|) Σ p_i (g_i + θ_ref)`.
    #[default]
    Literal,
    /// `θ = θ_ref + Σ p_i g_i / Σ p_i`.
    DeltaOnly,
}

/// Weighted federated averaging over the rows of `batch`.
pub fn fedavg_combine(
    batch: &UpdateBatch,
    population: usize,
    variant: FedAvgVariant,
) -> Result<ParamVector> {
    batch.require_rows()?;
    let d = batch.dim();
    match variant {
        FedAvgVariant::Literal => {
            let scale = population as f64 / batch.len() as f64;
            let mut out = vec![0.0; d];
            for (row, p) in batch.rows.iter().zip(&batch.weights) {
                for k in 0..d {
                    out[k] += p * (row[k] + batch.reference[k]);
                }
            }
            Ok(out.into_iter().map(|v| scale * v).collect())
        }
        FedAvgVariant::DeltaOnly => {
            let total: f64 = batch.weights.iter().sum();
            if !(total > 0.0) {
                return Err(FlError::InvalidWeights { sum: total });
            }
            let mut out = batch.reference.clone();
            for (row, p) in batch.rows.iter().zip(&batch.weights) {
                let w = p / total;
                for k in 0..d {
                    out[k] += w * row[k];
                }
            }
            Ok(out)
        }
    }
}

fn column(batch: &UpdateBatch, k: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(batch.rows.iter().map(|r| r[k]));
    buf.sort_by(f64::total_cmp);
}

/// Coordinate-wise median; even counts take the midpoint of the central pair.
pub fn median_combine(batch: &UpdateBatch) -> Result<Vec<f64>> {
    batch.require_rows()?;
    let n = batch.len();
    let mut buf = Vec::with_capacity(n);
    Ok((0..batch.dim())
        .map(|k| {
            column(batch, k, &mut buf);
            if n % 2 == 1 {
                buf[n / 2]
            } else {
                0.5 * (buf[n / 2 - 1] + buf[n / 2])
            }
        })
        .collect())
}

/// Number of values removed from each side by a `β`-trimmed mean of `n` values.
pub fn trim_count(n: usize, beta: f64) -> usize {
    (beta * n as f64).floor() as usize
}

/// Coordinate-wise `β`-trimmed mean, averaging over the values actually kept.
pub fn trimmed_mean_combine(batch: &UpdateBatch, beta: f64) -> Result<Vec<f64>> {
    batch.require_rows()?;
    if !(0.0..0.5).contains(&beta) {
        return Err(invalid("beta", "trim fraction must lie in [0, 0.5)"));
    }
    let n = batch.len();
    let t = trim_count(n, beta);
    if 2 * t >= n {
        return Err(FlError::TooFewRows {
            rows: n,
            requirement: "trimming must keep at least one row",
        });
    }
    let kept = (n - 2 * t) as f64;
    let mut buf = Vec::with_capacity(n);
    Ok((0..batch.dim())
        .map(|k| {
            column(batch, k, &mut buf);
            buf[t..n - t].iter().sum::<f64>() / kept
        })
        .collect())
}

/// Krum selection: the row whose `N − f − 2` nearest neighbours are closest.
///
/// Returns the chosen delta and the index of its row.
pub fn krum_combine(batch: &UpdateBatch, f: usize) -> Result<(Vec<f64>, usize)> {
    let n = batch.len();
    if n < f + 3 {
        return Err(FlError::TooFewRows {
            rows: n,
            requirement: "krum needs at least f + 3 rows",
        });
    }
    let m = n - f - 2;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = batch.rows[i]
                .iter()
                .zip(&batch.rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut best = (f64::INFINITY, usize::MAX, 0);
    let mut others = Vec::with_capacity(n - 1);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|j| *j != i).map(|j| dist[i * n + j]));
        others.sort_by(f64::total_cmp);
        let score: f64 = others[..m].iter().sum();
        let id = batch.users[i];
        if score < best.0 || (score == best.0 && id < best.1) {
            best = (score, id, i);
        }
    }
    Ok((batch.rows[best.2].clone(), best.2))
}

/// Misbehaviour of a Byzantine user.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum AttackKind {
    SignFlip,
    /// Replace the delta by i.i.d. `N(0, σ²)` noise.
    Gaussian { sigma: f64 },
    Scale { factor: f64 },
    /// Report `samples` as the local dataset size.
    ReportedSize { samples: usize },
}

impl AttackKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(invalid("sigma", "attack noise must be non-negative and finite"))
            }
            Self::Scale { factor } if !factor.is_finite() => {
                Err(invalid("factor", "attack scale must be finite"))
            }
            _ => Ok(()),
        }
    }
}

pub fn byzantine_perturb(
    u: &ModelUpdate,
    attack: &AttackKind,
    rng: &mut StreamRng,
) -> Result<ModelUpdate> {
    attack.validate()?;
    let mut out = u.clone();
    match *attack {
        AttackKind::SignFlip => out.delta.iter_mut().for_each(|v| *v = -*v),
        AttackKind::Gaussian { sigma } => {
            let normal =
                Normal::new(0.0, sigma).map_err(|_| invalid("sigma", "invalid attack noise"))?;
            out.delta.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        AttackKind::Scale { factor } => out.delta.iter_mut().for_each(|v| *v *= factor),
        AttackKind::ReportedSize { samples } => out.samples = samples,
    }
    Ok(out)
}

/// Applies `attacks` in order.
pub fn apply_attacks(
    u: &ModelUpdate,
    attacks: &[AttackKind],
    rng: &mut StreamRng,
) -> Result<ModelUpdate> {
    let mut out = u.clone();
    for a in attacks {
        out = byzantine_perturb(&out, a, rng)?;
    }
    Ok(out)
}
