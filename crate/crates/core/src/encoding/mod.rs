//! Local update encoding: delta coding, sparsification, dithered quantization
//! and Gaussian noising, each with a bit-cost account.
//!
//! Bit costs follow one convention throughout: raw reals cost [`FLOAT_BITS`],
//! sparse entries pay for a value plus a `⌈log₂ d⌉`-bit index, and quantizer
//! indices are charged their empirical entropy (no codec is run).

mod lattice;
mod uveqfed;

pub use lattice::{LatticeKind, LatticeSpec};
pub use uveqfed::{uveqfed_decode, uveqfed_encode};

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, invalid, FlError, Result};
use crate::model::ParamVector;
use crate::rng::StreamRng;

/// Bits charged for one full-precision real.
pub const FLOAT_BITS: u64 = 32;

/// A user's model delta `θ_t^i − θ_{t−E}^i` plus metadata.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelUpdate {
    pub delta: ParamVector,
    pub user: usize,
    pub round: usize,
    /// Dataset size `n_i` as reported by the user.
    pub samples: usize,
}

impl ModelUpdate {
    pub fn new(delta: ParamVector, user: usize, round: usize, samples: usize) -> Self {
        Self {
            delta,
            user,
            round,
            samples,
        }
    }

    pub fn dim(&self) -> usize {
        self.delta.len()
    }
}

/// `θ_local − θ_ref`.
pub fn delta_encode(
    local: &[f64],
    reference: &[f64],
    user: usize,
    round: usize,
    samples: usize,
) -> Result<ModelUpdate> {
    check_dim(reference.len(), local.len())?;
    let delta = local.iter().zip(reference).map(|(a, b)| a - b).collect();
    Ok(ModelUpdate::new(delta, user, round, samples))
}

/// Shared-randomness lattice payload.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatticePayload {
    /// True (unpadded) dimension `d`.
    pub dim: usize,
    pub lattice_dim: usize,
    /// `‖u‖`; zero marks an all-zero update with no coordinates.
    pub norm: f64,
    /// `M̄ · L` integer lattice coordinates.
    pub coords: Vec<i64>,
    pub seed: u64,
    pub dithered: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Payload {
    Dense(Vec<f64>),
    /// Strictly increasing indices in `[0, dim)`.
    Sparse {
        dim: usize,
        indices: Vec<u32>,
        values: Vec<f64>,
    },
    /// Scalar quantizer output `step · indices`; dither is not removed.
    Quantized { step: f64, indices: Vec<i64> },
    Lattice(LatticePayload),
    Noised { values: Vec<f64>, sigma: f64 },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Dense(_) => "dense",
            Payload::Sparse { .. } => "sparse",
            Payload::Quantized { .. } => "quantized",
            Payload::Lattice(_) => "lattice",
            Payload::Noised { .. } => "noised",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Payload::Dense(v) | Payload::Noised { values: v, .. } => v.len(),
            Payload::Sparse { dim, .. } => *dim,
            Payload::Quantized { indices, .. } => indices.len(),
            Payload::Lattice(l) => l.dim,
        }
    }
}

/// `s_t^i` with its bit cost.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncodedUpdate {
    pub user: usize,
    pub round: usize,
    pub samples: usize,
    pub payload: Payload,
    pub bit_cost: u64,
}

impl EncodedUpdate {
    fn wrap(u: &ModelUpdate, payload: Payload, bit_cost: u64) -> Self {
        Self {
            user: u.user,
            round: u.round,
            samples: u.samples,
            payload,
            bit_cost,
        }
    }

    /// Uncompressed update, 32 bits per coordinate.
    pub fn dense(u: &ModelUpdate) -> Self {
        let d = u.dim() as u64;
        Self::wrap(u, Payload::Dense(u.delta.to_vec()), FLOAT_BITS * d)
    }

    /// Server-side reconstruction for every payload that needs no shared randomness.
    pub fn reconstruct(&self) -> Result<Vec<f64>> {
        match &self.payload {
            Payload::Dense(v) | Payload::Noised { values: v, .. } => Ok(v.clone()),
            Payload::Sparse {
                dim,
                indices,
                values,
            } => {
                let mut out = vec![0.0; *dim];
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
                Ok(out)
            }
            Payload::Quantized { step, indices } => {
                Ok(indices.iter().map(|&q| q as f64 * step).collect())
            }
            Payload::Lattice(_) => Err(FlError::UnsupportedPayload("lattice")),
        }
    }
}

/// `n · H` bits, `H` the empirical entropy of the symbol stream, rounded up.
pub fn entropy_bits<T: Ord>(symbols: impl IntoIterator<Item = T>) -> u64 {
    let mut counts: BTreeMap<T, u64> = BTreeMap::new();
    let mut n = 0u64;
    for s in symbols {
        *counts.entry(s).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0;
    }
    let total = n as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    (total * h - 1e-9).ceil().max(0.0) as u64
}

fn index_bits(dim: usize) -> u64 {
    (usize::BITS - dim.saturating_sub(1).leading_zeros()).max(1) as u64
}

fn sparse_cost(dim: usize, nnz: usize) -> u64 {
    nnz as u64 * (FLOAT_BITS + index_bits(dim))
}

/// Keeps the `k` largest-magnitude coordinates; equal magnitudes keep the lower index.
pub fn topk_sparsify(u: &ModelUpdate, k: usize) -> Result<EncodedUpdate> {
    let d = u.dim();
    if k == 0 || k > d {
        return Err(invalid("k", alloc::format!("must lie in [1, {d}], got {k}")));
    }
    let mut order: Vec<u32> = (0..d as u32).collect();
    let mag = |i: u32| u.delta[i as usize].abs();
    order.sort_unstable_by(|&a, &b| mag(b).total_cmp(&mag(a)).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    let values = kept.iter().map(|&i| u.delta[i as usize]).collect();
    Ok(EncodedUpdate::wrap(
        u,
        Payload::Sparse {
            dim: d,
            indices: kept,
            values,
        },
        sparse_cost(d, k),
    ))
}

/// Random mask: each coordinate survives with probability `keep_prob`, rescaled by `1/keep_prob`.
pub fn mask_sparsify(u: &ModelUpdate, keep_prob: f64, rng: &mut StreamRng) -> Result<EncodedUpdate> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(invalid("keep_prob", "must lie in (0, 1]"));
    }
    let d = u.dim();
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, &v) in u.delta.iter().enumerate() {
        let keep = keep_prob >= 1.0 || rng.random::<f64>() < keep_prob;
        if keep {
            indices.push(i as u32);
            values.push(v / keep_prob);
        }
    }
    let cost = sparse_cost(d, indices.len());
    Ok(EncodedUpdate::wrap(
        u,
        Payload::Sparse {
            dim: d,
            indices,
            values,
        },
        cost,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DitherMode {
    On,
    /// Deterministic rounding; test use only.
    Off,
}

/// Non-subtractive scalar dithered quantization with a fixed step `Δ`.
pub fn qsgd_quantize(
    u: &ModelUpdate,
    step: f64,
    rng: &mut StreamRng,
    dither: DitherMode,
) -> Result<EncodedUpdate> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid("step", "quantizer step must be positive and finite"));
    }
    let indices = scalar_indices(&u.delta, step, rng, dither);
    let cost = entropy_bits(indices.iter().copied());
    Ok(EncodedUpdate::wrap(
        u,
        Payload::Quantized { step, indices },
        cost,
    ))
}

/// QSGD with the step tied to the update: `Δ = step · ζ‖u‖`, the same grid an
/// integer-lattice UVeQFed encoder uses. The step itself costs one extra float.
pub fn qsgd_quantize_scaled(
    u: &ModelUpdate,
    step: f64,
    zeta: f64,
    rng: &mut StreamRng,
    dither: DitherMode,
) -> Result<EncodedUpdate> {
    if !(step > 0.0 && zeta > 0.0) {
        return Err(invalid("step", "step and zeta must be positive"));
    }
    let delta = step * zeta * u.delta.norm();
    if delta == 0.0 {
        let indices = vec![0; u.dim()];
        return Ok(EncodedUpdate::wrap(
            u,
            Payload::Quantized { step: 0.0, indices },
            FLOAT_BITS,
        ));
    }
    let mut e = qsgd_quantize(u, delta, rng, dither)?;
    e.bit_cost += FLOAT_BITS;
    Ok(e)
}

fn scalar_indices(values: &[f64], step: f64, rng: &mut StreamRng, dither: DitherMode) -> Vec<i64> {
    values
        .iter()
        .map(|&v| {
            let d = match dither {
                DitherMode::On => (rng.random::<f64>() - 0.5) * step,
                DitherMode::Off => 0.0,
            };
            ((v + d) / step).round() as i64
        })
        .collect()
}

/// Gaussian-mechanism parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DpSpec {
    pub epsilon: f64,
    pub delta: f64,
    /// Exposure count `ℓ`.
    pub exposures: u32,
    /// Norm cap `C` applied before noising.
    pub clip: f64,
    /// Smallest local dataset size `min n_i`.
    pub min_samples: usize,
}

impl DpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid(
                "epsilon",
                "must lie in (0, 1) for the Gaussian mechanism",
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta", "must lie in (0, 1)"));
        }
        if self.exposures == 0 {
            return Err(invalid("exposures", "must be positive"));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(invalid("clip", "must be positive and finite"));
        }
        if self.min_samples == 0 {
            return Err(invalid("min_samples", "must be positive"));
        }
        Ok(())
    }

    /// `c = √(2 ln(1.25/δ))`.
    pub fn calibration(&self) -> f64 {
        (2.0 * (1.25 / self.delta).ln()).sqrt()
    }

    /// `σ = 4 c ℓ C / (ε · min n_i)`.
    pub fn sigma(&self) -> f64 {
        4.0 * self.calibration() * f64::from(self.exposures) * self.clip
            / (self.epsilon * self.min_samples as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NoiseMode {
    On,
    /// Clip only; test use.
    Off,
}

/// Clips `u` to norm `C` and adds i.i.d. `N(0, σ²)` noise.
pub fn dp_gaussianize(
    u: &ModelUpdate,
    dp: &DpSpec,
    rng: &mut StreamRng,
    noise: NoiseMode,
) -> Result<EncodedUpdate> {
    dp.validate()?;
    let norm = u.delta.norm();
    let scale = if norm > dp.clip { dp.clip / norm } else { 1.0 };
    let sigma = dp.sigma();
    let values: Vec<f64> = u
        .delta
        .iter()
        .map(|&v| {
            let clipped = v * scale;
            match noise {
                NoiseMode::On => {
                    let z: f64 = StandardNormal.sample(rng);
                    clipped + sigma * z
                }
                NoiseMode::Off => clipped,
            }
        })
        .collect();
    let cost = FLOAT_BITS * values.len() as u64;
    Ok(EncodedUpdate::wrap(u, Payload::Noised { values, sigma }, cost))
}

#[cfg(test)]
mod tests;
