//! Uplink channel models: orthogonal digital links and the over-the-air
//! Gaussian multiple-access channel.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use rand_distr::{Distribution, Normal};

use crate::encoding::EncodedUpdate;
use crate::error::{check_dim, invalid, FlError, Result};
use crate::model::ParamVector;
use crate::rng::StreamRng;

/// Safety factor applied to the previous round's largest squared update norm.
pub const COTAF_SAFETY: f64 = 1.1;

/// Flat-fading orthogonal link of one user.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinkSpec {
    /// Bandwidth `b` in Hz.
    pub bandwidth: f64,
    /// Transmit power `P`.
    pub power: f64,
    /// Channel gain `h_i`.
    pub gain: f64,
    /// Noise spectral power `σ_w²` per Hz.
    pub noise_psd: f64,
    /// Interference power `σ_{v,k}²` on each block.
    pub interference: Vec<f64>,
}

impl LinkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(invalid("bandwidth", "must be positive and finite"));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(invalid("power", "must be positive and finite"));
        }
        if !(self.gain >= 0.0 && self.gain.is_finite()) {
            return Err(invalid("gain", "must be non-negative and finite"));
        }
        if !(self.noise_psd >= 0.0 && self.noise_psd.is_finite()) {
            return Err(invalid("noise_psd", "must be non-negative and finite"));
        }
        if self.interference.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid("interference", "must be non-negative and finite"));
        }
        Ok(())
    }
}

/// `R = b log₂(1 + hP / (σ_v² + σ_w² b))` on block `block`.
pub fn link_rate(link: &LinkSpec, block: usize) -> Result<f64> {
    link.validate()?;
    let interference = *link.interference.get(block).ok_or_else(|| {
        invalid("block", alloc::format!("block {block} has no interference entry"))
    })?;
    let denom = interference + link.noise_psd * link.bandwidth;
    if denom <= 0.0 {
        return Err(FlError::UnboundedRate);
    }
    Ok(link.bandwidth * (1.0 + link.gain * link.power / denom).log2())
}

/// An update delivered over an orthogonal link.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub update: EncodedUpdate,
    pub delay: f64,
}

/// What the server observes after one uplink phase.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelOutput {
    Orthogonal(Vec<Delivery>),
    Ota(Vec<f64>),
}

/// Lossless capacity-achieving transmission: delay is `bit_cost / R`.
pub fn orthogonal_transmit(e: EncodedUpdate, rate: f64) -> Result<Delivery> {
    if !(rate > 0.0) || rate.is_nan() {
        return Err(invalid("rate", "link rate must be positive"));
    }
    let delay = e.bit_cost as f64 / rate;
    Ok(Delivery { update: e, delay })
}

/// Round delay is dictated by the slowest scheduled user.
pub fn round_delay(deliveries: &[Delivery]) -> f64 {
    deliveries.iter().map(|d| d.delay).fold(0.0, f64::max)
}

/// `α_t = P / max_i E‖Δθ‖²`.
pub fn cotaf_alpha(power: f64, max_expected_sqnorm: f64) -> Result<f64> {
    if !(power > 0.0 && power.is_finite()) {
        return Err(invalid("power", "must be positive and finite"));
    }
    if !(max_expected_sqnorm > 0.0 && max_expected_sqnorm.is_finite()) {
        return Err(invalid(
            "max_expected_sqnorm",
            "norm estimate must be positive and finite",
        ));
    }
    Ok(power / max_expected_sqnorm)
}

/// Server-side estimate of the largest expected squared update norm.
///
/// Uses the previous round's maximum times [`COTAF_SAFETY`]; before any
/// round has been observed the pilot value is used.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CotafEstimator {
    pilot: f64,
    last_max: Option<f64>,
}

impl CotafEstimator {
    pub fn new(pilot: f64) -> Result<Self> {
        if !(pilot > 0.0 && pilot.is_finite()) {
            return Err(invalid("pilot", "pilot norm estimate must be positive"));
        }
        Ok(Self {
            pilot,
            last_max: None,
        })
    }

    pub fn estimate(&self) -> f64 {
        match self.last_max {
            Some(m) if m > 0.0 => COTAF_SAFETY * m,
            _ => self.pilot,
        }
    }

    pub fn alpha(&self, power: f64) -> Result<f64> {
        cotaf_alpha(power, self.estimate())
    }

    /// Records this round's squared update norms.
    pub fn observe(&mut self, sqnorms: impl IntoIterator<Item = f64>) {
        let m = sqnorms.into_iter().fold(0.0, f64::max);
        if m > 0.0 && m.is_finite() {
            self.last_max = Some(m);
        }
    }
}

/// How the OTA power scaling `α_t` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Precoder {
    /// Time-varying `α_t` from [`CotafEstimator`].
    Cotaf,
    /// Constant `α`.
    Fixed(f64),
    /// COTAF's first-round `α`, then held constant.
    FrozenFirst,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OtaSpec {
    /// Noise variance `σ_w²` per coordinate.
    pub noise_var: f64,
    /// Static per-user gains; all ones means unfaded.
    pub gains: Vec<f64>,
    /// Users with a gain below this value are truncated.
    pub inversion_threshold: f64,
    pub precoder: Precoder,
    pub power: f64,
}

impl OtaSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(invalid("noise_var", "must be non-negative and finite"));
        }
        if !(self.inversion_threshold > 0.0) {
            return Err(invalid("inversion_threshold", "must be positive"));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(invalid("power", "must be positive and finite"));
        }
        if self.gains.iter().any(|h| !(*h >= 0.0 && h.is_finite())) {
            return Err(invalid("gains", "must be non-negative and finite"));
        }
        if let Precoder::Fixed(a) = self.precoder {
            if !(a > 0.0 && a.is_finite()) {
                return Err(invalid("alpha", "fixed alpha must be positive"));
            }
        }
        Ok(())
    }

    pub fn gain(&self, user: usize) -> f64 {
        self.gains.get(user).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Precoded {
    pub input: Vec<f64>,
    pub truncated: bool,
}

/// `x = √α u / h` with truncated channel inversion.
pub fn ota_precode(u: &[f64], alpha: f64, gain: f64, spec: &OtaSpec) -> Result<Precoded> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha", "must be positive and finite"));
    }
    if gain < spec.inversion_threshold {
        return Ok(Precoded {
            input: vec![0.0; u.len()],
            truncated: true,
        });
    }
    let s = alpha.sqrt() / gain;
    Ok(Precoded {
        input: u.iter().map(|v| s * v).collect(),
        truncated: false,
    })
}

/// `y = Σ x_i + w`, summed in the given order.
pub fn ota_mac(inputs: &[Vec<f64>], noise_var: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let Some(first) = inputs.first() else {
        return Err(FlError::EmptySelection);
    };
    let d = first.len();
    let mut y = vec![0.0; d];
    for x in inputs {
        check_dim(d, x.len())?;
        for (acc, v) in y.iter_mut().zip(x) {
            *acc += v;
        }
    }
    if noise_var > 0.0 {
        let normal = Normal::new(0.0, noise_var.sqrt())
            .map_err(|_| invalid("noise_var", "must be finite"))?;
        for v in &mut y {
            *v += normal.sample(rng);
        }
    } else if noise_var < 0.0 {
        return Err(invalid("noise_var", "must be non-negative"));
    }
    Ok(y)
}

/// `θ = y / (N √α) + θ_ref`.
pub fn ota_decode(y: &[f64], alpha: f64, n: usize, reference: &[f64]) -> Result<ParamVector> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha", "must be positive and finite"));
    }
    if n == 0 {
        return Err(FlError::EmptySelection);
    }
    check_dim(reference.len(), y.len())?;
    let s = 1.0 / (n as f64 * alpha.sqrt());
    Ok(y.iter().zip(reference).map(|(v, r)| s * v + r).collect())
}

/// Result of one over-the-air aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct OtaRound {
    pub theta: ParamVector,
    /// Users whose gain fell below the inversion threshold.
    pub truncated: Vec<usize>,
    /// Standard deviation of the effective noise on each decoded coordinate.
    pub effective_noise_std: f64,
}

/// Precodes each `(user, delta)`, fades it with the user's gain, superimposes
/// and decodes. Truncated users are excluded from the normalization count.
pub fn ota_aggregate(
    updates: &[(usize, &[f64])],
    alpha: f64,
    spec: &OtaSpec,
    reference: &[f64],
    rng: &mut StreamRng,
) -> Result<OtaRound> {
    spec.validate()?;
    let mut inputs = Vec::with_capacity(updates.len());
    let mut truncated = Vec::new();
    for &(user, delta) in updates {
        check_dim(reference.len(), delta.len())?;
        let h = spec.gain(user);
        let p = ota_precode(delta, alpha, h, spec)?;
        if p.truncated {
            truncated.push(user);
        } else {
            inputs.push(p.input.into_iter().map(|v| h * v).collect::<Vec<_>>());
        }
    }
    let active = inputs.len();
    if active == 0 {
        return Err(FlError::EmptySelection);
    }
    let y = ota_mac(&inputs, spec.noise_var, rng)?;
    let theta = ota_decode(&y, alpha, active, reference)?;
    Ok(OtaRound {
        theta,
        truncated,
        effective_noise_std: spec.noise_var.sqrt() / (active as f64 * alpha.sqrt()),
    })
}
