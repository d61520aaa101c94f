//! The federated round loop: distribute, select, train, perturb, encode,
//! transmit, decode, combine and record.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;
use rand::seq::index::sample as sample_indices;

use crate::allocation::SelectionPolicy;
use crate::analysis::{BoundKind, BoundParams};
use crate::channel::{LinkSpec, OtaSpec};
use crate::combining::{AttackKind, FedAvgVariant, GaussianMixture, RobustWeighting};
use crate::encoding::{DitherMode, DpSpec, LatticeSpec, NoiseMode};
use crate::error::{invalid, check_dim, FlError, Result};
use crate::model::{LocalDataset, LossSpec, Sample, TrainingSchedule};
use crate::rng::{SeedTree, Substream};

mod round;

pub use round::{RoundState, Simulation};

/// Uplink compression / privatization applied to every model update.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum EncoderSpec {
    /// Full-precision floats.
    Identity,
    TopK { k: usize },
    RandomMask { keep_prob: f64 },
    /// Scalar dithered quantizer; `zeta` ties the step to the update norm.
    Qsgd { step: f64, zeta: Option<f64>, dither: DitherMode },
    Uveqfed { lattice: LatticeSpec, dither: DitherMode },
    Privacy { dp: DpSpec, noise: NoiseMode },
}

/// Orthogonal links: one resource block per participant.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OrthogonalSpec {
    pub bandwidth: f64,
    pub power: f64,
    pub noise_psd: f64,
    /// Interference power of each block; its length is the block count `K`.
    pub interference: Vec<f64>,
    /// Static channel gain of each user.
    pub gains: Vec<f64>,
    pub assignment: AssignmentRule,
}

impl OrthogonalSpec {
    pub fn link(&self, user: usize) -> LinkSpec {
        LinkSpec {
            bandwidth: self.bandwidth,
            power: self.power,
            gain: self.gains[user],
            noise_psd: self.noise_psd,
            interference: self.interference.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AssignmentRule {
    /// Minimize the largest delay.
    #[default]
    MinMax,
    /// Participant `j` (ascending id) takes block `j`.
    InOrder,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ChannelSpec {
    /// Lossless and instantaneous.
    Ideal,
    Orthogonal(OrthogonalSpec),
    /// Over-the-air superposition; each aggregation occupies one slot.
    Ota {
        spec: OtaSpec,
        pilot: f64,
        slot_seconds: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum CombinerSpec {
    FedAvg { variant: FedAvgVariant },
    Median { weighting: RobustWeighting },
    TrimmedMean { beta: f64, weighting: RobustWeighting },
    Krum { f: usize, weighting: RobustWeighting },
}

/// How users outside the selected set are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Exclusion {
    /// Non-participants are skipped entirely.
    #[default]
    Skip,
    /// Non-participants send a zero update with zero weight.
    ZeroPayload,
}

/// Bounds reported next to every metrics row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundReport {
    pub kinds: Vec<BoundKind>,
    pub params: BoundParams,
}

/// Everything that determines how a round is executed.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub loss: LossSpec,
    pub schedule: TrainingSchedule,
    pub selection: SelectionPolicy,
    pub encoder: EncoderSpec,
    pub channel: ChannelSpec,
    pub combiner: CombinerSpec,
    /// Applied in order to the updates of Byzantine users.
    pub attacks: Vec<AttackKind>,
    pub seeds: SeedTree,
    pub exclusion: Exclusion,
    pub bounds: Option<BoundReport>,
}

impl Pipeline {
    /// Checks the pipeline against a federation; reports the first problem found.
    pub fn validate(&self, fed: &Federation) -> Result<()> {
        let n = fed.users();
        let min_len = fed.datasets.iter().map(LocalDataset::len).min().unwrap_or(0);
        self.schedule.validate(min_len)?;
        self.selection.validate(n)?;
        for a in &self.attacks {
            a.validate()?;
        }
        match self.encoder {
            EncoderSpec::TopK { k } if k == 0 || k > fed.param_dim(&self.loss) => {
                return Err(invalid("k", "top-k must keep between 1 and d coordinates"));
            }
            EncoderSpec::RandomMask { keep_prob } if !(keep_prob > 0.0 && keep_prob <= 1.0) => {
                return Err(invalid("keep_prob", "must lie in (0, 1]"));
            }
            EncoderSpec::Qsgd { step, zeta, .. } => {
                if !(step > 0.0 && step.is_finite()) || zeta.is_some_and(|z| !(z > 0.0)) {
                    return Err(invalid("step", "quantizer step and zeta must be positive"));
                }
            }
            EncoderSpec::Privacy { dp, .. } => dp.validate()?,
            _ => {}
        }
        match &self.channel {
            ChannelSpec::Ideal => {}
            ChannelSpec::Orthogonal(o) => {
                check_dim(n, o.gains.len())?;
                let k = self.selection.participants(n);
                if o.interference.len() < k {
                    return Err(FlError::InfeasibleAssignment {
                        users: k,
                        blocks: o.interference.len(),
                    });
                }
                o.link(0).validate()?;
                if o.gains.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                    return Err(invalid("gains", "orthogonal links need positive gains"));
                }
            }
            ChannelSpec::Ota {
                spec,
                pilot,
                slot_seconds,
            } => {
                spec.validate()?;
                if self.encoder != EncoderSpec::Identity {
                    return Err(invalid("encoder", "over-the-air aggregation needs the identity encoder"));
                }
                if !matches!(self.combiner, CombinerSpec::FedAvg { .. }) {
                    return Err(invalid("combiner", "over-the-air aggregation only averages"));
                }
                if !(*pilot > 0.0) || !(*slot_seconds >= 0.0) {
                    return Err(invalid("pilot", "pilot must be positive and slot length non-negative"));
                }
                if !spec.gains.is_empty() {
                    check_dim(n, spec.gains.len())?;
                }
            }
        }
        match self.combiner {
            CombinerSpec::TrimmedMean { beta, .. } if !(0.0..0.5).contains(&beta) => {
                return Err(invalid("beta", "trim fraction must lie in [0, 0.5)"));
            }
            CombinerSpec::Krum { f, .. } if self.selection.participants(n) < f + 3 => {
                return Err(FlError::TooFewRows {
                    rows: self.selection.participants(n),
                    requirement: "krum needs at least f + 3 participants",
                });
            }
            _ => {}
        }
        Ok(())
    }
}

/// The users, their data and static per-user attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub datasets: Vec<LocalDataset>,
    pub test: Vec<Sample>,
    /// Index of the model each user trains; all zero for a single global model.
    pub groups: Vec<usize>,
    /// Distance of each user to the access point.
    pub distances: Vec<f64>,
    pub attackers: Vec<bool>,
    /// Input density of each group, enabling mixture-of-models inference.
    pub densities: Option<Vec<GaussianMixture>>,
}

impl Federation {
    pub fn new(datasets: Vec<LocalDataset>, test: Vec<Sample>) -> Result<Self> {
        let n = datasets.len();
        if n == 0 {
            return Err(invalid("users", "need at least one user"));
        }
        let f = datasets[0].input_dim();
        for d in &datasets {
            check_dim(f, d.input_dim())?;
        }
        for s in &test {
            check_dim(f, s.input.len())?;
        }
        Ok(Self {
            datasets,
            test,
            groups: vec![0; n],
            distances: vec![0.0; n],
            attackers: vec![false; n],
            densities: None,
        })
    }

    pub fn users(&self) -> usize {
        self.datasets.len()
    }

    pub fn input_dim(&self) -> usize {
        self.datasets[0].input_dim()
    }

    pub fn param_dim(&self, loss: &LossSpec) -> usize {
        loss.param_dim(self.input_dim())
    }

    pub fn group_count(&self) -> usize {
        self.groups.iter().copied().max().map_or(1, |g| g + 1)
    }

    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        check_dim(self.users(), groups.len())?;
        let c = groups.iter().copied().max().unwrap_or(0) + 1;
        if (0..c).any(|g| !groups.contains(&g)) {
            return Err(invalid("groups", "every model index must have at least one user"));
        }
        self.groups = groups;
        Ok(self)
    }

    pub fn with_distances(mut self, distances: Vec<f64>) -> Result<Self> {
        check_dim(self.users(), distances.len())?;
        if distances.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(invalid("distances", "must be non-negative and finite"));
        }
        self.distances = distances;
        Ok(self)
    }

    pub fn with_attackers(mut self, attackers: Vec<bool>) -> Result<Self> {
        check_dim(self.users(), attackers.len())?;
        self.attackers = attackers;
        Ok(self)
    }

    /// Fits a `components`-term Gaussian mixture to the pooled inputs of each group.
    pub fn with_fitted_densities(mut self, components: usize, seeds: &SeedTree) -> Result<Self> {
        let c = self.group_count();
        let mut densities = Vec::with_capacity(c);
        for g in 0..c {
            let inputs: Vec<&[f64]> = self
                .datasets
                .iter()
                .zip(&self.groups)
                .filter(|(_, gg)| **gg == g)
                .flat_map(|(d, _)| d.samples().iter().map(|s| s.input.as_slice()))
                .collect();
            let mut rng = seeds.stream(Substream::Init, 1, g);
            densities.push(GaussianMixture::fit(&inputs, components, 300, &mut rng)?);
        }
        self.densities = Some(densities);
        Ok(self)
    }

    /// Members of group `g`, ascending.
    pub fn members(&self, g: usize) -> Vec<usize> {
        (0..self.users()).filter(|i| self.groups[*i] == g).collect()
    }
}

/// A fixed subset of `⌊fraction · n⌋` users drawn from the attack substream.
pub fn choose_attackers(n: usize, fraction: f64, seeds: &SeedTree) -> Result<Vec<bool>> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(invalid("byzantine_fraction", "must lie in [0, 0.5)"));
    }
    let count = (fraction * n as f64 + 1e-9).floor() as usize;
    let mut rng = seeds.global(Substream::Attack);
    let mut flags = vec![false; n];
    for i in sample_indices(&mut rng, n, count) {
        flags[i] = true;
    }
    Ok(flags)
}
