//! Turns a configuration into a federation and pipeline, runs it, and writes
//! the metrics, model, manifest and checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::Rng;
use serde::{Deserialize, Serialize};

use flsim_core::allocation::SelectionPolicy;
use flsim_core::analysis::{estimate_bound_params, smoothness_constants, BoundKind, BoundParams, LatticeTerms, OtaTerms};
use flsim_core::channel::{OtaSpec, Precoder};
use flsim_core::combining::{AttackKind, FedAvgVariant, RobustWeighting};
use flsim_core::data::{
    clustered_task, partition_dataset, quadratic_task, train_test_split, ClusteredTaskSpec, PartitionSpec,
    QuadraticTaskSpec,
};
use flsim_core::encoding::{DitherMode, DpSpec, LatticeSpec, NoiseMode};
use flsim_core::model::{size_weights, LearningRate, LossSpec, ModelKind, Sample, TrainingSchedule};
use flsim_core::orchestrator::{
    choose_attackers, AssignmentRule, BoundReport, ChannelSpec, CombinerSpec, EncoderSpec, Exclusion, Federation,
    OrthogonalSpec, Pipeline, RoundState, Simulation,
};
use flsim_core::rng::{SeedTree, Substream};

use crate::config::*;
use crate::dataset::load_samples;
use crate::formats::{write_metrics, write_model};

/// A configuration resolved into runnable parts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub pipeline: Pipeline,
    pub federation: Federation,
    /// `(L, μ)` when the diminishing rate was requested.
    pub smoothness: Option<(f64, f64)>,
}

fn loss_spec(m: &ModelConfig) -> LossSpec {
    let kind = match m.kind {
        ModelName::Quadratic => ModelKind::QuadraticSynthetic,
        ModelName::SquaredError => ModelKind::SquaredError,
        ModelName::Logistic => ModelKind::Logistic,
        ModelName::Softmax => ModelKind::Softmax { classes: m.classes },
        ModelName::Mlp => ModelKind::Mlp {
            hidden: m.hidden,
            classes: m.classes,
        },
    };
    LossSpec::new(kind, m.l2)
}

struct Data {
    datasets: Vec<flsim_core::model::LocalDataset>,
    test: Vec<Sample>,
    membership: Option<Vec<usize>>,
}

fn load_data(cfg: &ExperimentConfig, seeds: &SeedTree) -> anyhow::Result<Data> {
    let d = &cfg.data;
    let mut rng = seeds.global(Substream::Data);
    match d.source {
        DataSource::Quadratic => {
            let spec = QuadraticTaskSpec {
                dim: d.dim,
                samples_per_user: d.samples_per_user,
                test_samples_per_user: d.test_samples_per_user,
                heterogeneity: d.heterogeneity,
                noise: d.noise,
            };
            let task = quadratic_task(d.users, &spec, &mut rng)?;
            Ok(Data {
                datasets: task.datasets,
                test: task.test,
                membership: None,
            })
        }
        DataSource::Clustered => {
            let spec = ClusteredTaskSpec {
                clusters: d.clusters,
                components: d.components,
                dim: d.dim,
                samples_per_user: d.samples_per_user,
                test_samples_per_cluster: d.test_samples_per_cluster,
                separation: d.separation,
                noise: d.noise,
            };
            let task = clustered_task(d.users, &spec, &mut rng)?;
            Ok(Data {
                datasets: task.datasets,
                test: task.test,
                membership: Some(task.membership),
            })
        }
        DataSource::Csv => {
            let path = d.path.as_ref().ok_or_else(|| anyhow!("data.path is required"))?;
            let mut pool = load_samples(path, d.feature_scale, d.bias)?;
            if let Some(m) = d.max_samples {
                let mut keep = rand::seq::index::sample(&mut rng, pool.len(), m.min(pool.len())).into_vec();
                keep.sort_unstable();
                pool = keep.into_iter().map(|i| pool[i].clone()).collect();
            }
            let (train, test) = train_test_split(pool, d.test_fraction, &mut rng)?;
            let spec = match d.partition {
                PartitionName::Iid => PartitionSpec::Iid,
                PartitionName::LabelShards => PartitionSpec::LabelShards {
                    shards_per_user: d.shards_per_user,
                },
            };
            let datasets = partition_dataset(train, d.users, spec, &mut seeds.global(Substream::Partition))?;
            Ok(Data {
                datasets,
                test,
                membership: None,
            })
        }
    }
}

fn check_labels(loss: &LossSpec, data: &Data) -> anyhow::Result<()> {
    let labels = data
        .datasets
        .iter()
        .flat_map(|d| d.samples().iter())
        .chain(data.test.iter())
        .map(|s| s.label);
    match loss.kind {
        ModelKind::Logistic => {
            if let Some(b) = labels.into_iter().find(|b| *b != 0.0 && *b != 1.0) {
                bail!("logistic regression needs 0/1 labels, found {b}");
            }
        }
        ModelKind::Softmax { classes } | ModelKind::Mlp { classes, .. } => {
            if let Some(b) = labels.into_iter().find(|b| b.fract() != 0.0 || *b < 0.0 || *b >= classes as f64) {
                bail!("labels must be integers in [0, {classes}), found {b}");
            }
        }
        _ => {}
    }
    Ok(())
}

/// Distances uniform in `[min_distance, radius]`, from the geometry substream.
fn place_users(cfg: &ExperimentConfig, seeds: &SeedTree) -> Vec<f64> {
    let ch = &cfg.channel;
    let mut rng = seeds.global(Substream::Geometry);
    (0..cfg.data.users)
        .map(|_| {
            if ch.radius > ch.min_distance {
                rng.random_range(ch.min_distance..=ch.radius)
            } else {
                ch.min_distance
            }
        })
        .collect()
}

fn gains(cfg: &ExperimentConfig, distances: &[f64]) -> Vec<f64> {
    let ch = &cfg.channel;
    if !ch.gains.is_empty() {
        return ch.gains.clone();
    }
    distances.iter().map(|d| d.powf(-ch.path_loss_exponent)).collect()
}

/// Builds the federation and pipeline; every error found in the configuration
/// is reported before any data is generated.
pub fn prepare(cfg: &ExperimentConfig) -> anyhow::Result<Prepared> {
    cfg.validate()?;
    let seeds = cfg.seeds.tree();
    let loss = loss_spec(&cfg.model);
    let data = load_data(cfg, &seeds)?;
    check_labels(&loss, &data)?;

    let distances = place_users(cfg, &seeds);
    let gains = gains(cfg, &distances);
    let attackers = choose_attackers(cfg.data.users, cfg.attack.fraction, &seeds)?;
    let mut fed = Federation::new(data.datasets, data.test)?
        .with_distances(distances)?
        .with_attackers(attackers)?;
    if cfg.combiner.kind == CombinerName::Mixture {
        let groups = data.membership.ok_or_else(|| anyhow!("the mixture combiner needs clustered data"))?;
        fed = fed.with_groups(groups)?.with_fitted_densities(cfg.combiner.components, &seeds)?;
    }

    let s = &cfg.schedule;
    let mut smoothness = None;
    let rate = match s.rate {
        RateName::Constant => LearningRate::Constant(s.eta),
        RateName::Diminishing => {
            let (l, mu) = smoothness_constants(&fed.datasets, &loss)?;
            smoothness = Some((l, mu));
            LearningRate::diminishing(l, mu, s.local_steps)
        }
    };
    let schedule = TrainingSchedule {
        local_steps: s.local_steps,
        batch_size: s.batch_size,
        total_steps: s.total_steps,
        rate,
    };

    let n = cfg.data.users;
    let sel = &cfg.selection;
    let k = cfg.participants();
    let selection = match sel.policy {
        SelectionName::Full => SelectionPolicy::Full,
        SelectionName::Uniform => SelectionPolicy::Uniform { k },
        SelectionName::Probabilistic => SelectionPolicy::Probabilistic { k, alpha: sel.alpha },
        SelectionName::RoundRobin => SelectionPolicy::RoundRobin { k },
        SelectionName::Bandit => SelectionPolicy::Bandit {
            k,
            explore: sel.explore,
        },
    };

    let e = &cfg.encoder;
    let dither = if e.dither { DitherMode::On } else { DitherMode::Off };
    let encoder = match e.kind {
        EncoderName::Identity => EncoderSpec::Identity,
        EncoderName::TopK => EncoderSpec::TopK { k: e.k },
        EncoderName::RandomMask => EncoderSpec::RandomMask { keep_prob: e.keep_prob },
        EncoderName::Qsgd => EncoderSpec::Qsgd {
            step: e.step,
            zeta: e.scaled.then_some(e.zeta),
            dither,
        },
        EncoderName::Uveqfed => EncoderSpec::Uveqfed {
            lattice: lattice(e)?,
            dither,
        },
        EncoderName::Privacy => EncoderSpec::Privacy {
            dp: DpSpec {
                epsilon: e.epsilon,
                delta: e.delta,
                exposures: e.exposures,
                clip: e.clip,
                min_samples: fed.datasets.iter().map(|d| d.len()).min().unwrap_or(1),
            },
            noise: if e.noise { NoiseMode::On } else { NoiseMode::Off },
        },
    };

    let ch = &cfg.channel;
    let channel = match ch.kind {
        ChannelName::Ideal => ChannelSpec::Ideal,
        ChannelName::Orthogonal => {
            let interference = if ch.interference.is_empty() {
                vec![ch.interference_power; cfg.blocks()]
            } else {
                ch.interference.clone()
            };
            ChannelSpec::Orthogonal(OrthogonalSpec {
                bandwidth: ch.bandwidth,
                power: ch.power,
                noise_psd: ch.noise_psd,
                interference,
                gains: gains.clone(),
                assignment: match ch.assignment {
                    AssignmentName::MinMax => AssignmentRule::MinMax,
                    AssignmentName::InOrder => AssignmentRule::InOrder,
                },
            })
        }
        ChannelName::Ota => ChannelSpec::Ota {
            spec: OtaSpec {
                noise_var: ch.noise_var,
                gains: if ch.fading { gains.clone() } else { Vec::new() },
                inversion_threshold: ch.inversion_threshold,
                precoder: match ch.precoder {
                    PrecoderName::Cotaf => Precoder::Cotaf,
                    PrecoderName::Fixed => Precoder::Fixed(ch.alpha),
                    PrecoderName::FrozenFirst => Precoder::FrozenFirst,
                },
                power: ch.power,
            },
            pilot: ch.pilot,
            slot_seconds: ch.slot_seconds,
        },
    };

    let cb = &cfg.combiner;
    let weighting = if cb.weighted {
        RobustWeighting::Weighted
    } else {
        RobustWeighting::Unweighted
    };
    let variant = match cb.variant {
        VariantName::Literal => FedAvgVariant::Literal,
        VariantName::DeltaOnly => FedAvgVariant::DeltaOnly,
    };
    let combiner = match cb.kind {
        CombinerName::Fedavg | CombinerName::Mixture => CombinerSpec::FedAvg { variant },
        CombinerName::Median => CombinerSpec::Median { weighting },
        CombinerName::TrimmedMean => CombinerSpec::TrimmedMean { beta: cb.beta, weighting },
        CombinerName::Krum => CombinerSpec::Krum { f: cb.f, weighting },
    };

    let a = &cfg.attack;
    let attack = match a.kind {
        AttackName::SignFlip => AttackKind::SignFlip,
        AttackName::Gaussian => AttackKind::Gaussian { sigma: a.sigma },
        AttackName::Scale => AttackKind::Scale { factor: a.factor },
        AttackName::ReportedSize => AttackKind::ReportedSize { samples: a.samples },
    };

    let mut pipeline = Pipeline {
        loss,
        schedule,
        selection,
        encoder,
        channel,
        combiner,
        attacks: vec![attack],
        seeds: seeds.clone(),
        exclusion: if cb.zero_payloads {
            Exclusion::ZeroPayload
        } else {
            Exclusion::Skip
        },
        bounds: None,
    };
    if !cfg.bounds.kinds.is_empty() {
        let params = bound_params(cfg, &pipeline, &fed, n)?;
        pipeline.bounds = Some(BoundReport {
            kinds: cfg.bounds.kinds.clone(),
            params,
        });
    }
    pipeline.validate(&fed)?;
    Ok(Prepared {
        config: cfg.clone(),
        pipeline,
        federation: fed,
        smoothness,
    })
}

fn lattice(e: &EncoderConfig) -> anyhow::Result<LatticeSpec> {
    Ok(match e.lattice {
        LatticeName::Integer => LatticeSpec::integer(e.step, e.zeta)?,
        LatticeName::Hexagonal => LatticeSpec::hexagonal(e.step, e.zeta)?,
    })
}

/// Bound constants estimated from the data, with the quantizer and channel
/// terms of the configured encoder and channel.
pub fn bound_params(cfg: &ExperimentConfig, pipeline: &Pipeline, fed: &Federation, users: usize) -> anyhow::Result<BoundParams> {
    let weights = size_weights(&fed.datasets);
    let theta0 = pipeline
        .loss
        .init_params(fed.input_dim(), &mut pipeline.seeds.stream(Substream::Init, 0, 0));
    let mut rng = pipeline.seeds.stream(Substream::Init, 2, 0);
    let mut bp = estimate_bound_params(&fed.datasets, &weights, &pipeline.loss, &pipeline.schedule, &theta0, &mut rng)?;
    let dim = fed.param_dim(&pipeline.loss);
    if cfg.encoder.kind == EncoderName::Uveqfed {
        let l = lattice(&cfg.encoder)?;
        bp.lattice = Some(LatticeTerms {
            subvectors: l.subvectors(dim),
            zeta: l.zeta(),
            second_moment: l.normalized_second_moment(),
        });
    }
    if cfg.channel.kind == ChannelName::Ota {
        bp.ota = Some(OtaTerms {
            dim,
            noise_var: cfg.channel.noise_var,
            power: cfg.channel.power,
            users,
        });
    }
    Ok(bp)
}

/// Every bound that applies to the configuration, at `T`.
pub fn bounds_at_horizon(cfg: &ExperimentConfig) -> anyhow::Result<Vec<(BoundKind, f64)>> {
    let mut kinds = cfg.bounds.kinds.clone();
    if kinds.is_empty() {
        kinds.push(BoundKind::Fedavg);
        if cfg.encoder.kind == EncoderName::Uveqfed {
            kinds.push(BoundKind::Uveqfed);
        }
        if cfg.channel.kind == ChannelName::Ota {
            kinds.push(BoundKind::Cotaf);
        }
    }
    let mut with_kinds = cfg.clone();
    with_kinds.bounds.kinds = kinds.clone();
    let prepared = prepare(&with_kinds)?;
    let report = prepared.pipeline.bounds.expect("bounds were requested");
    kinds
        .iter()
        .map(|k| Ok((*k, k.evaluate(&report.params, cfg.schedule.total_steps)?)))
        .collect()
}

/// Runs every round in memory.
pub fn simulate(prepared: &Prepared) -> anyhow::Result<RoundState> {
    Ok(Simulation::new(&prepared.pipeline, &prepared.federation)?.run()?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub master: u64,
    pub substreams: std::collections::BTreeMap<String, u64>,
}

/// Everything needed to replay a run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: SeedRecord,
    pub users: usize,
    pub param_dim: usize,
    pub rounds: usize,
    pub attackers: Vec<usize>,
    pub groups: Vec<usize>,
    pub smoothness: Option<(f64, f64)>,
    pub bound_params: Option<BoundParams>,
}

impl Manifest {
    pub fn new(p: &Prepared) -> Self {
        let seeds = p.config.seeds.tree();
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: p.config.clone(),
            seeds: SeedRecord {
                master: seeds.master(),
                substreams: Substream::ALL
                    .iter()
                    .map(|s| (s.name().to_string(), seeds.seed_of(*s)))
                    .collect(),
            },
            users: p.federation.users(),
            param_dim: p.federation.param_dim(&p.pipeline.loss),
            rounds: p.pipeline.schedule.rounds(),
            attackers: (0..p.federation.users()).filter(|i| p.federation.attackers[*i]).collect(),
            groups: p.federation.groups.clone(),
            smoothness: p.smoothness,
            bound_params: p.pipeline.bounds.as_ref().map(|b| b.params.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    config: ExperimentConfig,
    state: RoundState,
}

/// Files written by a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: RoundState,
    /// False when the run stopped early and left a checkpoint behind.
    pub finished: bool,
    pub metrics: PathBuf,
    pub model: PathBuf,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Continue from the checkpoint in the output directory, if one exists.
    pub resume: bool,
    /// Run at most this many rounds in this invocation, then checkpoint.
    pub stop_after: Option<usize>,
}

/// Writes through a temporary file and renames it into place.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

fn metrics_bytes(p: &Prepared, state: &RoundState) -> anyhow::Result<Vec<u8>> {
    let kinds: Vec<BoundKind> = p.pipeline.bounds.as_ref().map(|b| b.kinds.clone()).unwrap_or_default();
    let mut buf = Vec::new();
    write_metrics(&mut buf, &state.history, &kinds)?;
    Ok(buf)
}

/// The metrics CSV of a finished state, as bytes.
pub fn metrics_csv(p: &Prepared, state: &RoundState) -> anyhow::Result<Vec<u8>> {
    metrics_bytes(p, state)
}

/// Runs the experiment and writes its outputs under `output.dir`.
///
/// Metrics, model and manifest are written only once every round has run;
/// an early stop leaves just the checkpoint.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> anyhow::Result<RunOutput> {
    let p = prepare(cfg)?;
    let o = &cfg.output;
    fs::create_dir_all(&o.dir).with_context(|| format!("cannot create {}", o.dir.display()))?;
    let checkpoint = o.dir.join(&o.checkpoint);
    let metrics = o.dir.join(&o.metrics);
    let model = o.dir.join(&o.model);
    let manifest = o.dir.join(&o.manifest);

    let mut sim = if opts.resume && checkpoint.exists() {
        let text = fs::read_to_string(&checkpoint)?;
        let cp: Checkpoint = serde_json::from_str(&text).context("unreadable checkpoint")?;
        if cp.config != *cfg {
            bail!("checkpoint {} was written by a different configuration", checkpoint.display());
        }
        Simulation::resume(&p.pipeline, &p.federation, cp.state)?
    } else {
        Simulation::new(&p.pipeline, &p.federation)?
    };
    let save = |state: &RoundState| {
        let cp = Checkpoint {
            config: cfg.clone(),
            state: state.clone(),
        };
        write_atomic(&checkpoint, |w| Ok(serde_json::to_writer(w, &cp)?))
    };
    let mut ran = 0;
    while !sim.is_finished() {
        if opts.stop_after.is_some_and(|m| ran >= m) {
            save(sim.state())?;
            return Ok(RunOutput {
                state: sim.into_state(),
                finished: false,
                metrics,
                model,
                manifest,
                checkpoint,
            });
        }
        sim.step()?;
        ran += 1;
        if o.checkpoint_every > 0 && sim.state().round % o.checkpoint_every == 0 && !sim.is_finished() {
            save(sim.state())?;
        }
    }
    let state = sim.into_state();
    let csv = metrics_bytes(&p, &state)?;
    write_atomic(&metrics, |w| Ok(w.write_all(&csv)?))?;
    write_atomic(&model, |w| write_model(w, &state.models))?;
    write_atomic(&manifest, |w| Ok(serde_json::to_writer_pretty(w, &Manifest::new(&p))?))?;
    if checkpoint.exists() {
        fs::remove_file(&checkpoint)?;
    }
    Ok(RunOutput {
        state,
        finished: true,
        metrics,
        model,
        manifest,
        checkpoint,
    })
}

/// Final metrics of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub delay_s: f64,
    pub bits: u64,
}

/// Runs the configuration once per value of the dotted parameter `param`.
/// Each run writes into `output.dir/<param>=<value>`; a summary goes to
/// `output.dir/sweep.csv`.
pub fn sweep(doc: &toml::Table, param: &str, values: &[String], base: Option<&Path>) -> anyhow::Result<Vec<SweepPoint>> {
    let base_cfg = config_from_table(doc.clone(), base)?;
    let root = base_cfg.output.dir.clone();
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let mut d = doc.clone();
        set_path(&mut d, param, v)?;
        let dir = root.join(format!("{param}={}", v.replace(['/', '\\'], "_")));
        set_path(&mut d, "output.dir", &toml::Value::String(dir.display().to_string()).to_string())?;
        let cfg = config_from_table(d, base).with_context(|| format!("{param} = {v}"))?;
        let out = run_experiment(&cfg, RunOptions::default()).with_context(|| format!("{param} = {v}"))?;
        let last = out.state.latest();
        points.push(SweepPoint {
            value: v.clone(),
            train_loss: last.train_loss,
            test_loss: last.test_loss,
            test_acc: last.test_acc,
            delay_s: last.delay_s,
            bits: last.bits,
        });
    }
    fs::create_dir_all(&root)?;
    write_atomic(&root.join("sweep.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([param, "train_loss", "test_loss", "test_acc", "delay_s", "bits"])?;
        for p in &points {
            out.write_record([
                p.value.clone(),
                p.train_loss.to_string(),
                p.test_loss.map(|v| v.to_string()).unwrap_or_default(),
                p.test_acc.map(|v| v.to_string()).unwrap_or_default(),
                p.delay_s.to_string(),
                p.bits.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    Ok(points)
}

/// Deserializes a TOML table; relative CSV paths resolve against `base`.
pub fn config_from_table(doc: toml::Table, base: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = doc.try_into()?;
    if let (Some(p), Some(b)) = (&cfg.data.path, base) {
        if p.is_relative() {
            cfg.data.path = Some(b.join(p));
        }
    }
    Ok(cfg)
}
