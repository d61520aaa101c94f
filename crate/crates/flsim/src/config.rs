//! Experiment configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid (small, synthetic)
//! experiment. Unknown keys are rejected. Fields that only matter for some
//! `kind` are ignored otherwise.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flsim_core::analysis::BoundKind;
use flsim_core::rng::{SeedTree, Substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: SeedsConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub selection: SelectionConfig,
    pub encoder: EncoderConfig,
    pub channel: ChannelConfig,
    pub combiner: CombinerConfig,
    pub attack: AttackConfig,
    pub bounds: BoundsConfig,
    pub output: OutputConfig,
}

/// Master seed plus optional per-substream seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsConfig {
    pub master: u64,
    /// Keys: data, partition, init, batch, selection, dither, mask, privacy,
    /// channel-noise, attack, geometry.
    pub overrides: BTreeMap<Substream, u64>,
}

impl SeedsConfig {
    pub fn tree(&self) -> SeedTree {
        self.overrides
            .iter()
            .fold(SeedTree::new(self.master), |t, (s, v)| t.with_override(*s, *v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    /// `½(aᵀθ − b)²`.
    #[default]
    Quadratic,
    /// `(aᵀθ − b)²`.
    SquaredError,
    /// Binary logistic regression, labels 0/1.
    Logistic,
    /// Multinomial logistic regression.
    Softmax,
    /// One hidden tanh layer.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelName,
    /// Class count for softmax and mlp.
    pub classes: usize,
    /// Hidden width for mlp.
    pub hidden: usize,
    /// Ridge weight `λ`.
    pub l2: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelName::Quadratic,
            classes: 10,
            hidden: 50,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Per-user linear regression with heterogeneous regressors.
    #[default]
    Quadratic,
    /// Users grouped into clusters with distinct input mixtures and regressors.
    Clustered,
    /// Comma-separated file: features, then the label.
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionName {
    #[default]
    Iid,
    /// Sort by label and deal out `shards_per_user` contiguous shards per user.
    LabelShards,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Number of users `N`.
    pub users: usize,
    /// CSV path, relative to the config file.
    pub path: Option<PathBuf>,
    /// Keep a random subset of this many CSV samples.
    pub max_samples: Option<usize>,
    /// Multiply every CSV feature by this factor.
    pub feature_scale: f64,
    /// Append a constant 1 feature.
    pub bias: bool,
    /// Held-out fraction of the CSV pool.
    pub test_fraction: f64,
    pub partition: PartitionName,
    pub shards_per_user: usize,
    /// Input dimension of synthetic data.
    pub dim: usize,
    pub samples_per_user: usize,
    pub test_samples_per_user: usize,
    pub heterogeneity: f64,
    /// Label noise standard deviation of synthetic data.
    pub noise: f64,
    pub clusters: usize,
    /// Gaussian components in each cluster's input density.
    pub components: usize,
    pub separation: f64,
    pub test_samples_per_cluster: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Quadratic,
            users: 10,
            path: None,
            max_samples: None,
            feature_scale: 1.0,
            bias: false,
            test_fraction: 0.2,
            partition: PartitionName::Iid,
            shards_per_user: 2,
            dim: 10,
            samples_per_user: 50,
            test_samples_per_user: 10,
            heterogeneity: 0.5,
            noise: 0.1,
            clusters: 3,
            components: 3,
            separation: 3.0,
            test_samples_per_cluster: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RateName {
    #[default]
    Constant,
    /// `η_t = 2/(μ(γ + t))` with `L`, `μ` computed from the data.
    Diminishing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// `E`.
    pub local_steps: usize,
    /// `B`.
    pub batch_size: usize,
    /// `T`, a multiple of `E`.
    pub total_steps: usize,
    pub rate: RateName,
    /// Constant learning rate.
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            local_steps: 5,
            batch_size: 10,
            total_steps: 500,
            rate: RateName::Constant,
            eta: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionName {
    #[default]
    Full,
    Uniform,
    /// Update-norm and distance aware sampling.
    Probabilistic,
    RoundRobin,
    /// Upper-confidence-bound on observed delays.
    Bandit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub policy: SelectionName,
    /// Participants per round; required unless the policy is `full`.
    pub k: Option<usize>,
    /// Balance between update norm and distance.
    pub alpha: f64,
    /// Bandit exploration weight.
    pub explore: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            policy: SelectionName::Full,
            k: None,
            alpha: 0.5,
            explore: flsim_core::allocation::DEFAULT_EXPLORE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderName {
    #[default]
    Identity,
    TopK,
    RandomMask,
    Qsgd,
    Uveqfed,
    /// Clip and add Gaussian noise.
    Privacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatticeName {
    Integer,
    #[default]
    Hexagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderName,
    /// Coordinates kept by top-k.
    pub k: usize,
    pub keep_prob: f64,
    /// Quantizer step; relative to `ζ‖u‖` for uveqfed and scaled qsgd.
    pub step: f64,
    /// Norm multiplier `ζ`.
    pub zeta: f64,
    /// Scale the qsgd step by `ζ‖u‖`.
    pub scaled: bool,
    pub lattice: LatticeName,
    pub dither: bool,
    pub epsilon: f64,
    pub delta: f64,
    /// Exposure count `ℓ`.
    pub exposures: u32,
    /// Norm cap `C`.
    pub clip: f64,
    /// Disable to clip without noise.
    pub noise: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderName::Identity,
            k: 1,
            keep_prob: 0.5,
            step: 0.1,
            zeta: 2.0,
            scaled: false,
            lattice: LatticeName::Hexagonal,
            dither: true,
            epsilon: 0.5,
            delta: 1e-3,
            exposures: 1,
            clip: 1.0,
            noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelName {
    /// Instant and lossless.
    #[default]
    Ideal,
    /// One resource block per participant.
    Orthogonal,
    /// Analog over-the-air superposition.
    Ota,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentName {
    #[default]
    MinMax,
    InOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrecoderName {
    /// Time-varying scaling from the previous round's update energy.
    #[default]
    Cotaf,
    /// Constant `alpha`.
    Fixed,
    /// The first round's scaling, held.
    FrozenFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub kind: ChannelName,
    /// Hz.
    pub bandwidth: f64,
    /// Transmit power, W.
    pub power: f64,
    /// Noise power spectral density, W/Hz.
    pub noise_psd: f64,
    /// Resource blocks `K`; defaults to the participants per round.
    pub blocks: Option<usize>,
    /// Interference power of each block, W; overrides `interference_power`.
    pub interference: Vec<f64>,
    pub interference_power: f64,
    /// Per-user gains; empty means path loss from the user's distance.
    pub gains: Vec<f64>,
    pub path_loss_exponent: f64,
    /// Users are placed uniformly at distances in `[min_distance, radius]`.
    pub min_distance: f64,
    pub radius: f64,
    pub assignment: AssignmentName,
    /// Over-the-air noise variance `σ_w²`.
    pub noise_var: f64,
    pub precoder: PrecoderName,
    /// Scaling of the `fixed` precoder.
    pub alpha: f64,
    /// Energy estimate used before any round is observed.
    pub pilot: f64,
    pub slot_seconds: f64,
    /// Users below this gain stay silent.
    pub inversion_threshold: f64,
    /// Fade over-the-air links with the path-loss gains.
    pub fading: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            kind: ChannelName::Ideal,
            bandwidth: 1e6,
            power: 1.0,
            noise_psd: 1e-12,
            blocks: None,
            interference: Vec::new(),
            interference_power: 0.0,
            gains: Vec::new(),
            path_loss_exponent: 2.0,
            min_distance: 1.0,
            radius: 100.0,
            assignment: AssignmentName::MinMax,
            noise_var: 1e-3,
            precoder: PrecoderName::Cotaf,
            alpha: 1.0,
            pilot: 1.0,
            slot_seconds: 1e-3,
            inversion_threshold: 1e-6,
            fading: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombinerName {
    #[default]
    Fedavg,
    Median,
    TrimmedMean,
    Krum,
    /// One federated average per cluster, gated by fitted input densities.
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    /// `(N/|G|) Σ p_i (g_i + θ)`.
    #[default]
    Literal,
    /// `θ + Σ p_i g_i / Σ p_i`.
    DeltaOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinerConfig {
    pub kind: CombinerName,
    pub variant: VariantName,
    /// Scale rows by `N p_i` before robust combining.
    pub weighted: bool,
    /// Trim fraction per side.
    pub beta: f64,
    /// Tolerated Byzantine rows for Krum.
    pub f: usize,
    /// Gaussian components per cluster density.
    pub components: usize,
    /// Non-participants send zero payloads instead of being skipped.
    pub zero_payloads: bool,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            kind: CombinerName::Fedavg,
            variant: VariantName::Literal,
            weighted: false,
            beta: 0.1,
            f: 1,
            components: 3,
            zero_payloads: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    #[default]
    SignFlip,
    Gaussian,
    Scale,
    ReportedSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Fraction `α` of users that are Byzantine, in `[0, 0.5)`.
    pub fraction: f64,
    pub kind: AttackName,
    pub sigma: f64,
    pub factor: f64,
    pub samples: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            fraction: 0.0,
            kind: AttackName::SignFlip,
            sigma: 1.0,
            factor: -1.0,
            samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    /// Bound columns added to the metrics: fedavg, uveqfed, cotaf.
    pub kinds: Vec<BoundKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory, relative to the working directory.
    pub dir: PathBuf,
    pub metrics: String,
    pub model: String,
    pub manifest: String,
    pub checkpoint: String,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            metrics: "metrics.csv".into(),
            model: "model.bin".into(),
            manifest: "manifest.json".into(),
            checkpoint: "checkpoint.json".into(),
            checkpoint_every: 0,
        }
    }
}

/// Every problem found in a configuration.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

struct Checker(Vec<String>);

impl Checker {
    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.0.push(msg());
        }
    }

    fn positive(&mut self, name: &str, v: f64) {
        self.check(v > 0.0 && v.is_finite(), || format!("{name} must be positive and finite (got {v})"));
    }

    fn non_negative(&mut self, name: &str, v: f64) {
        self.check(v >= 0.0 && v.is_finite(), || format!("{name} must be non-negative and finite (got {v})"));
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Parses a file; a relative CSV path is resolved against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn participants(&self) -> usize {
        match self.selection.policy {
            SelectionName::Full => self.data.users,
            _ => self.selection.k.unwrap_or(0),
        }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut c = Checker(Vec::new());
        let d = &self.data;
        let n = d.users;
        c.check(n > 0, || "data.users must be at least 1".into());

        let m = &self.model;
        c.non_negative("model.l2", m.l2);
        if matches!(m.kind, ModelName::Softmax | ModelName::Mlp) {
            c.check(m.classes >= 2, || "model.classes must be at least 2".into());
        }
        if m.kind == ModelName::Mlp {
            c.check(m.hidden >= 1, || "model.hidden must be at least 1".into());
        }
        let regression = matches!(m.kind, ModelName::Quadratic | ModelName::SquaredError);
        match d.source {
            DataSource::Quadratic | DataSource::Clustered => {
                c.check(regression, || {
                    "synthetic data sources produce regression labels; use model.kind = quadratic or squared_error".into()
                });
                c.check(d.dim > 0, || "data.dim must be at least 1".into());
                c.check(d.samples_per_user > 0, || "data.samples_per_user must be at least 1".into());
                c.non_negative("data.heterogeneity", d.heterogeneity);
                c.non_negative("data.noise", d.noise);
            }
            DataSource::Csv => {
                c.check(d.path.is_some(), || "data.path is required for the csv source".into());
                c.check((0.0..1.0).contains(&d.test_fraction), || {
                    format!("data.test_fraction must lie in [0, 1) (got {})", d.test_fraction)
                });
                c.positive("data.feature_scale", d.feature_scale);
            }
        }
        if d.source == DataSource::Clustered {
            c.check(d.clusters >= 1 && d.clusters <= n, || "data.clusters must lie in [1, users]".into());
            c.check(d.components >= 1, || "data.components must be at least 1".into());
            c.non_negative("data.separation", d.separation);
        }
        if d.partition == PartitionName::LabelShards {
            c.check(d.source == DataSource::Csv, || "label_shards partitioning needs the csv source".into());
            c.check(d.shards_per_user >= 1, || "data.shards_per_user must be at least 1".into());
        }

        let s = &self.schedule;
        c.check(s.local_steps >= 1, || "schedule.local_steps must be at least 1".into());
        c.check(s.batch_size >= 1, || "schedule.batch_size must be at least 1".into());
        c.check(s.total_steps >= 1, || "schedule.total_steps must be at least 1".into());
        c.check(s.local_steps == 0 || s.total_steps.is_multiple_of(s.local_steps), || {
            format!("schedule.total_steps ({}) must be a multiple of local_steps ({})", s.total_steps, s.local_steps)
        });
        match s.rate {
            RateName::Constant => c.positive("schedule.eta", s.eta),
            RateName::Diminishing => c.check(
                matches!(m.kind, ModelName::Quadratic | ModelName::SquaredError | ModelName::Logistic),
                || "the diminishing rate needs a strongly convex model (quadratic, squared_error, logistic)".into(),
            ),
        }

        let sel = &self.selection;
        let k = self.participants();
        if sel.policy != SelectionName::Full {
            c.check(sel.k.is_some(), || "selection.k is required for this policy".into());
        }
        c.check(k >= 1 && k <= n, || format!("selection.k must lie in [1, {n}] (got {k})"));
        c.check((0.0..=1.0).contains(&sel.alpha), || "selection.alpha must lie in [0, 1]".into());
        c.non_negative("selection.explore", sel.explore);

        let e = &self.encoder;
        match e.kind {
            EncoderName::TopK => c.check(e.k >= 1, || "encoder.k must be at least 1".into()),
            EncoderName::RandomMask => c.check(e.keep_prob > 0.0 && e.keep_prob <= 1.0, || {
                "encoder.keep_prob must lie in (0, 1]".into()
            }),
            EncoderName::Qsgd | EncoderName::Uveqfed => {
                c.positive("encoder.step", e.step);
                c.positive("encoder.zeta", e.zeta);
            }
            EncoderName::Privacy => {
                c.check(e.epsilon > 0.0 && e.epsilon < 1.0, || "encoder.epsilon must lie in (0, 1)".into());
                c.check(e.delta > 0.0 && e.delta < 1.0, || "encoder.delta must lie in (0, 1)".into());
                c.check(e.exposures >= 1, || "encoder.exposures must be at least 1".into());
                c.positive("encoder.clip", e.clip);
            }
            EncoderName::Identity => {}
        }

        let ch = &self.channel;
        match ch.kind {
            ChannelName::Ideal => {}
            ChannelName::Orthogonal => {
                c.positive("channel.bandwidth", ch.bandwidth);
                c.positive("channel.power", ch.power);
                c.non_negative("channel.noise_psd", ch.noise_psd);
                c.non_negative("channel.interference_power", ch.interference_power);
                for v in &ch.interference {
                    c.non_negative("channel.interference", *v);
                }
                let blocks = self.blocks();
                c.check(blocks >= k, || format!("channel.blocks ({blocks}) must be at least the participants per round ({k})"));
                c.check(ch.interference.is_empty() || ch.blocks.is_none_or(|b| b == ch.interference.len()), || {
                    "channel.blocks disagrees with the length of channel.interference".into()
                });
                c.check(ch.noise_psd > 0.0 || ch.interference_power > 0.0 || ch.interference.iter().all(|v| *v > 0.0) && !ch.interference.is_empty(), || {
                    "noise and interference are both zero: link rates would be unbounded".into()
                });
            }
            ChannelName::Ota => {
                c.non_negative("channel.noise_var", ch.noise_var);
                c.positive("channel.power", ch.power);
                c.positive("channel.pilot", ch.pilot);
                c.non_negative("channel.slot_seconds", ch.slot_seconds);
                c.positive("channel.inversion_threshold", ch.inversion_threshold);
                if ch.precoder == PrecoderName::Fixed {
                    c.positive("channel.alpha", ch.alpha);
                }
                c.check(e.kind == EncoderName::Identity, || "the ota channel carries dense updates: use encoder.kind = identity".into());
                c.check(matches!(self.combiner.kind, CombinerName::Fedavg | CombinerName::Mixture), || {
                    "the ota channel can only average: use combiner.kind = fedavg or mixture".into()
                });
            }
        }
        if ch.kind != ChannelName::Ideal {
            for v in &ch.gains {
                c.positive("channel.gains", *v);
            }
            c.check(ch.gains.is_empty() || ch.gains.len() == n, || {
                format!("channel.gains has {} entries for {n} users", ch.gains.len())
            });
        }
        c.positive("channel.min_distance", ch.min_distance);
        c.check(ch.radius >= ch.min_distance, || "channel.radius must be at least min_distance".into());
        c.non_negative("channel.path_loss_exponent", ch.path_loss_exponent);

        let cb = &self.combiner;
        match cb.kind {
            CombinerName::TrimmedMean => c.check((0.0..0.5).contains(&cb.beta), || "combiner.beta must lie in [0, 0.5)".into()),
            CombinerName::Krum => c.check(k >= cb.f + 3, || format!("krum needs at least f + 3 = {} participants (got {k})", cb.f + 3)),
            CombinerName::Mixture => {
                c.check(d.source == DataSource::Clustered, || "the mixture combiner needs data.source = clustered".into());
                c.check(cb.components >= 1, || "combiner.components must be at least 1".into());
            }
            _ => {}
        }

        let a = &self.attack;
        c.check((0.0..0.5).contains(&a.fraction), || format!("attack.fraction must lie in [0, 0.5) (got {})", a.fraction));
        match a.kind {
            AttackName::Gaussian => c.non_negative("attack.sigma", a.sigma),
            AttackName::Scale => c.check(a.factor.is_finite(), || "attack.factor must be finite".into()),
            _ => {}
        }

        for b in &self.bounds.kinds {
            c.check(matches!(m.kind, ModelName::Quadratic | ModelName::SquaredError | ModelName::Logistic), || {
                "bounds need a strongly convex model (quadratic, squared_error, logistic)".into()
            });
            match b {
                BoundKind::Uveqfed => c.check(e.kind == EncoderName::Uveqfed, || "the uveqfed bound needs encoder.kind = uveqfed".into()),
                BoundKind::Cotaf => c.check(ch.kind == ChannelName::Ota, || "the cotaf bound needs channel.kind = ota".into()),
                BoundKind::Fedavg => {}
            }
        }

        let o = &self.output;
        for (name, v) in [("metrics", &o.metrics), ("model", &o.model), ("manifest", &o.manifest), ("checkpoint", &o.checkpoint)] {
            c.check(!v.is_empty() && !v.contains(['/', '\\']), || format!("output.{name} must be a plain file name"));
        }

        if c.0.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(c.0))
        }
    }

    /// Resource blocks `K`.
    pub fn blocks(&self) -> usize {
        let ch = &self.channel;
        ch.blocks.unwrap_or(if ch.interference.is_empty() {
            self.participants()
        } else {
            ch.interference.len()
        })
    }
}

/// Replaces the value at a dotted `path` (e.g. `encoder.step`) in a TOML
/// document. `raw` is parsed as a TOML value, falling back to a string.
pub fn set_path(doc: &mut toml::Table, path: &str, raw: &str) -> anyhow::Result<()> {
    let value = parse_value(raw);
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow::anyhow!("empty parameter path"))?;
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow::anyhow!("`{p}` in `{path}` is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
