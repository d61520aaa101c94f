//! Convergence-bound calculators and per-round run metrics.
//!
//! The local SGD bound reads
//! `(L / (γ + T − 1)) · (2B̃/μ² + (γ/2)·‖θ₀ − θ*‖²)` with
//! `B̃ = Σ p_i²σ_i² + 6LΓ + 8(E − 1)²G²` and `γ = max{8L/μ, E}`. Quantization
//! and over-the-air noise enter through additive terms in `B̃`.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::model::schedule_gamma;

mod estimate;

pub use estimate::{estimate_bound_params, minimizer, smoothness_constants, Minimizer};

/// Lattice quantizer constants entering the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatticeTerms {
    /// `M̄`, the number of subvectors.
    pub subvectors: usize,
    pub zeta: f64,
    /// Normalized second moment `σ̄²_L`.
    pub second_moment: f64,
}

/// Over-the-air channel constants entering the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OtaTerms {
    pub dim: usize,
    pub noise_var: f64,
    pub power: f64,
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundParams {
    /// `L`.
    pub smoothness: f64,
    /// `μ`.
    pub strong_convexity: f64,
    pub local_steps: usize,
    pub total_steps: usize,
    /// `Γ = F* − Σ p_i f_i*`.
    pub heterogeneity: f64,
    /// `G²`.
    pub grad_sq_bound: f64,
    pub weights: Vec<f64>,
    /// `σ_i²`.
    pub variances: Vec<f64>,
    /// `‖θ₀ − θ*‖²`.
    pub init_dist: f64,
    pub lattice: Option<LatticeTerms>,
    pub ota: Option<OtaTerms>,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let (l, mu) = (self.smoothness, self.strong_convexity);
        if !(mu > 0.0 && l >= mu && l.is_finite()) {
            return Err(invalid("smoothness", "need L ≥ μ > 0"));
        }
        if self.local_steps == 0 {
            return Err(invalid("local_steps", "must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(invalid("total_steps", "must be at least 1"));
        }
        crate::error::check_dim(self.weights.len(), self.variances.len())?;
        let scalars = [self.heterogeneity, self.grad_sq_bound, self.init_dist];
        if scalars.iter().chain(&self.weights).chain(&self.variances).any(|v| !(*v >= 0.0)) {
            return Err(invalid("bound", "parameters must be non-negative"));
        }
        Ok(())
    }

    /// `γ = max{8L/μ, E}`.
    pub fn gamma(&self) -> f64 {
        schedule_gamma(self.smoothness, self.strong_convexity, self.local_steps)
    }

    /// `Σ p_i² σ_i²`.
    pub fn weighted_variance(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.variances)
            .map(|(p, s)| p * p * s)
            .sum()
    }

    /// `B̃` of plain local SGD.
    pub fn b_tilde(&self) -> f64 {
        let e = self.local_steps as f64;
        self.weighted_variance()
            + 6.0 * self.smoothness * self.heterogeneity
            + 8.0 * (e - 1.0) * (e - 1.0) * self.grad_sq_bound
    }

    /// `4 M̄ ζ² σ̄²_L E² Σ p_i² σ_i²`.
    pub fn lattice_term(&self) -> Result<f64> {
        let lt = self
            .lattice
            .ok_or_else(|| invalid("lattice", "quantizer constants are required"))?;
        let e = self.local_steps as f64;
        Ok(4.0 * lt.subvectors as f64 * lt.zeta * lt.zeta * lt.second_moment * e * e
            * self.weighted_variance())
    }

    /// `4 d E² G² σ_w² / (P N²)`.
    pub fn ota_term(&self) -> Result<f64> {
        let o = self
            .ota
            .ok_or_else(|| invalid("ota", "channel constants are required"))?;
        if !(o.power > 0.0) || o.users == 0 {
            return Err(invalid("ota", "need positive power and at least one user"));
        }
        let e = self.local_steps as f64;
        let n = o.users as f64;
        Ok(4.0 * o.dim as f64 * e * e * self.grad_sq_bound * o.noise_var / (o.power * n * n))
    }

    /// The bound for an arbitrary `B̃` at `T` steps.
    pub fn bound_with(&self, b_tilde: f64, total_steps: usize) -> f64 {
        let (l, mu) = (self.smoothness, self.strong_convexity);
        let g = self.gamma();
        l / (g + total_steps as f64 - 1.0) * (2.0 * b_tilde / (mu * mu) + 0.5 * g * self.init_dist)
    }
}

pub fn fedavg_bound(bp: &BoundParams) -> Result<f64> {
    bp.validate()?;
    Ok(bp.bound_with(bp.b_tilde(), bp.total_steps))
}

pub fn uveqfed_bound(bp: &BoundParams) -> Result<f64> {
    bp.validate()?;
    Ok(bp.bound_with(bp.b_tilde() + bp.lattice_term()?, bp.total_steps))
}

pub fn cotaf_bound(bp: &BoundParams) -> Result<f64> {
    bp.validate()?;
    Ok(bp.bound_with(bp.b_tilde() + bp.ota_term()?, bp.total_steps))
}

/// Which bound columns a run reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BoundKind {
    Fedavg,
    Uveqfed,
    Cotaf,
}

impl BoundKind {
    pub fn column(&self) -> &'static str {
        match self {
            BoundKind::Fedavg => "bound_fedavg",
            BoundKind::Uveqfed => "bound_uveqfed",
            BoundKind::Cotaf => "bound_cotaf",
        }
    }

    /// The bound after `total_steps` steps; `0` gives the value at initialization.
    pub fn evaluate(&self, bp: &BoundParams, total_steps: usize) -> Result<f64> {
        bp.validate()?;
        let extra = match self {
            BoundKind::Fedavg => 0.0,
            BoundKind::Uveqfed => bp.lattice_term()?,
            BoundKind::Cotaf => bp.ota_term()?,
        };
        Ok(bp.bound_with(bp.b_tilde() + extra, total_steps))
    }
}

/// One row of the metrics stream, written after each aggregation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    pub round: usize,
    /// Global SGD step `t = round · E`.
    pub step: usize,
    /// Cumulative uplink delay in seconds.
    pub delay_s: f64,
    /// Cumulative uplink bits.
    pub bits: u64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub participants: Vec<usize>,
    /// Values of the requested bounds at `step`, in request order.
    pub bounds: Vec<f64>,
}

#[cfg(test)]
mod tests;
