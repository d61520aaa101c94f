use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math under no_std
use num_traits::Float;

use super::{AssignmentRule, ChannelSpec, CombinerSpec, EncoderSpec, Exclusion, Federation, Pipeline};
use crate::allocation::{
    assign_blocks, select_bandit, select_probabilistic, select_round_robin, select_uniform,
    BanditHistory, DelayMatrix, SelectionPolicy,
};
use crate::analysis::MetricsRecord;
use crate::channel::{link_rate, orthogonal_transmit, ota_aggregate, CotafEstimator, Precoder};
use crate::combining::{
    apply_attacks, fedavg_combine, krum_combine, median_combine, mixture_predict,
    trimmed_mean_combine, ClusterModelSet, UpdateBatch,
};
use crate::encoding::{
    delta_encode, dp_gaussianize, mask_sparsify, qsgd_quantize, qsgd_quantize_scaled,
    topk_sparsify, uveqfed_decode, uveqfed_encode, EncodedUpdate, ModelUpdate, Payload,
};
use crate::error::{FlError, Result};
use crate::model::{local_loss, local_train, ParamVector};
use crate::rng::Substream;

/// Everything carried from one aggregation to the next.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundState {
    /// Completed aggregations.
    pub round: usize,
    /// Global SGD step `t = round · E`.
    pub step: usize,
    /// Current model of each group.
    pub models: Vec<ParamVector>,
    /// Cumulative uplink delay in seconds.
    pub delay_s: f64,
    /// Cumulative uplink bits.
    pub bits: u64,
    /// Norm of each user's most recent update, as received.
    pub last_norms: Vec<Option<f64>>,
    /// Dataset size each user last reported.
    pub reported: Vec<usize>,
    pub bandit: BanditHistory,
    /// Norm tracker of each group for over-the-air precoding.
    pub cotaf: Vec<CotafEstimator>,
    /// First-round precoder scaling of each group.
    pub frozen_alpha: Vec<Option<f64>>,
    pub history: Vec<MetricsRecord>,
}

impl RoundState {
    /// The state before the first round, with its round-0 metrics row.
    pub fn initial(pipeline: &Pipeline, fed: &Federation) -> Result<Self> {
        pipeline.validate(fed)?;
        let n = fed.users();
        let c = fed.group_count();
        let mut init = pipeline.seeds.stream(Substream::Init, 0, 0);
        let theta0 = pipeline.loss.init_params(fed.input_dim(), &mut init);
        let pilot = match &pipeline.channel {
            ChannelSpec::Ota { pilot, .. } => *pilot,
            _ => 1.0,
        };
        let mut state = Self {
            round: 0,
            step: 0,
            models: vec![theta0; c],
            delay_s: 0.0,
            bits: 0,
            last_norms: vec![None; n],
            reported: fed.datasets.iter().map(|d| d.len()).collect(),
            bandit: BanditHistory::new(n),
            cotaf: vec![CotafEstimator::new(pilot)?; c],
            frozen_alpha: vec![None; c],
            history: Vec::new(),
        };
        let row = evaluate(&state, pipeline, fed, Vec::new())?;
        state.history.push(row);
        Ok(state)
    }

    pub fn latest(&self) -> &MetricsRecord {
        self.history.last().expect("state always holds the round-0 row")
    }
}

/// A run in progress: the pipeline, the federation and the evolving state.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    pipeline: &'a Pipeline,
    fed: &'a Federation,
    state: RoundState,
}

impl<'a> Simulation<'a> {
    pub fn new(pipeline: &'a Pipeline, fed: &'a Federation) -> Result<Self> {
        let state = RoundState::initial(pipeline, fed)?;
        Ok(Self {
            pipeline,
            fed,
            state,
        })
    }

    /// Continues from a checkpointed state.
    pub fn resume(pipeline: &'a Pipeline, fed: &'a Federation, state: RoundState) -> Result<Self> {
        pipeline.validate(fed)?;
        let c = fed.group_count();
        let n = fed.users();
        let dim = fed.param_dim(&pipeline.loss);
        let consistent = state.models.len() == c
            && state.models.iter().all(|m| m.len() == dim && m.is_finite())
            && state.last_norms.len() == n
            && state.reported.len() == n
            && state.bandit.users() == n
            && state.cotaf.len() == c
            && state.frozen_alpha.len() == c
            && state.step == state.round * pipeline.schedule.local_steps
            && state.round <= pipeline.schedule.rounds();
        if !consistent {
            return Err(crate::error::invalid("checkpoint", "state does not match the pipeline"));
        }
        Ok(Self {
            pipeline,
            fed,
            state,
        })
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn into_state(self) -> RoundState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.pipeline.schedule.rounds()
    }

    /// Runs one round and returns its metrics row. On error the state is unchanged.
    pub fn step(&mut self) -> Result<&MetricsRecord> {
        self.state = run_round(&self.state, self.pipeline, self.fed)?;
        Ok(self.state.latest())
    }

    /// Runs every remaining round.
    pub fn run(mut self) -> Result<RoundState> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.state)
    }

    /// Per-group models with their input densities, when the federation has them.
    pub fn cluster_models(&self) -> Option<ClusterModelSet> {
        cluster_set(&self.state, self.fed)
    }
}

fn cluster_set(state: &RoundState, fed: &Federation) -> Option<ClusterModelSet> {
    let densities = fed.densities.clone()?;
    ClusterModelSet::new(state.models.clone(), densities).ok()
}

fn select(state: &RoundState, pipeline: &Pipeline, fed: &Federation, round: usize) -> Result<Vec<usize>> {
    let n = fed.users();
    let mut rng = pipeline.seeds.stream(Substream::Selection, round, 0);
    match pipeline.selection {
        SelectionPolicy::Full => Ok((0..n).collect()),
        SelectionPolicy::Uniform { k } => select_uniform(n, k, &mut rng),
        SelectionPolicy::RoundRobin { k } => select_round_robin(n, k, round - 1),
        SelectionPolicy::Bandit { k, explore } => select_bandit(&state.bandit, k, round, explore),
        SelectionPolicy::Probabilistic { k, alpha } => {
            let known: Vec<f64> = state.last_norms.iter().flatten().copied().collect();
            let fallback = if known.is_empty() {
                1.0
            } else {
                known.iter().sum::<f64>() / known.len() as f64
            };
            let norms: Vec<f64> = state
                .last_norms
                .iter()
                .map(|v| v.unwrap_or(fallback))
                .collect();
            select_probabilistic(&norms, &fed.distances, alpha, k, &mut rng)
        }
    }
}

fn encode(u: &ModelUpdate, pipeline: &Pipeline, round: usize) -> Result<EncodedUpdate> {
    let seeds = &pipeline.seeds;
    let user = u.user;
    match pipeline.encoder {
        EncoderSpec::Identity => Ok(EncodedUpdate::dense(u)),
        EncoderSpec::TopK { k } => topk_sparsify(u, k),
        EncoderSpec::RandomMask { keep_prob } => {
            mask_sparsify(u, keep_prob, &mut seeds.stream(Substream::Mask, round, user))
        }
        EncoderSpec::Qsgd { step, zeta, dither } => {
            let mut rng = seeds.stream(Substream::Dither, round, user);
            match zeta {
                Some(z) => qsgd_quantize_scaled(u, step, z, &mut rng, dither),
                None => qsgd_quantize(u, step, &mut rng, dither),
            }
        }
        EncoderSpec::Uveqfed { lattice, dither } => {
            Ok(uveqfed_encode(u, &lattice, seeds.dither_seed(round, user), dither))
        }
        EncoderSpec::Privacy { dp, noise } => {
            dp_gaussianize(u, &dp, &mut seeds.stream(Substream::Privacy, round, user), noise)
        }
    }
}

fn decode(e: &EncodedUpdate, pipeline: &Pipeline, round: usize) -> Result<Vec<f64>> {
    match (&e.payload, pipeline.encoder) {
        (Payload::Lattice(_), EncoderSpec::Uveqfed { lattice, .. }) => {
            let seed = pipeline.seeds.dither_seed(round, e.user);
            Ok(uveqfed_decode(e, &lattice, seed)?.delta.into_inner())
        }
        _ => e.reconstruct(),
    }
}

/// A delivered payload, tagged with whether its sender was scheduled.
struct Received {
    user: usize,
    delta: Vec<f64>,
    samples: usize,
    scheduled: bool,
}

/// One aggregation: select, train, attack, encode, transmit, decode, combine, record.
pub fn run_round(state: &RoundState, pipeline: &Pipeline, fed: &Federation) -> Result<RoundState> {
    let schedule = &pipeline.schedule;
    if state.round >= schedule.rounds() {
        return Err(crate::error::invalid("round", "all rounds have already run"));
    }
    let round = state.round + 1;
    let start_step = state.round * schedule.local_steps;
    let seeds = &pipeline.seeds;
    let mut next = state.clone();

    let selected = select(state, pipeline, fed, round)?;
    if selected.is_empty() {
        return Err(FlError::EmptySelection);
    }
    let mut scheduled = vec![false; fed.users()];
    for &i in &selected {
        scheduled[i] = true;
    }

    let mut updates = Vec::with_capacity(selected.len());
    for &i in &selected {
        let reference = &state.models[fed.groups[i]];
        let mut rng = seeds.stream(Substream::Batch, round, i);
        let local = local_train(reference, &fed.datasets[i], &pipeline.loss, schedule, start_step, &mut rng)?;
        let mut u = delta_encode(&local, reference, i, round, fed.datasets[i].len())?;
        if fed.attackers[i] && !pipeline.attacks.is_empty() {
            u = apply_attacks(&u, &pipeline.attacks, &mut seeds.stream(Substream::Attack, round, i))?;
        }
        next.reported[i] = u.samples;
        updates.push(u);
    }

    let mut received = Vec::new();
    match &pipeline.channel {
        ChannelSpec::Ota {
            spec, slot_seconds, ..
        } => {
            for g in 0..fed.group_count() {
                let group: Vec<&ModelUpdate> =
                    updates.iter().filter(|u| fed.groups[u.user] == g).collect();
                if group.is_empty() {
                    continue;
                }
                let alpha = match spec.precoder {
                    Precoder::Cotaf => state.cotaf[g].alpha(spec.power)?,
                    Precoder::Fixed(a) => a,
                    Precoder::FrozenFirst => match state.frozen_alpha[g] {
                        Some(a) => a,
                        None => {
                            let a = state.cotaf[g].alpha(spec.power)?;
                            next.frozen_alpha[g] = Some(a);
                            a
                        }
                    },
                };
                let rows: Vec<(usize, &[f64])> =
                    group.iter().map(|u| (u.user, &u.delta[..])).collect();
                let mut noise = seeds.stream(Substream::ChannelNoise, round, g);
                let out = ota_aggregate(&rows, alpha, spec, &state.models[g], &mut noise)?;
                next.models[g] = out.theta;
                next.cotaf[g].observe(group.iter().map(|u| u.delta.sq_norm()));
                for u in &group {
                    next.last_norms[u.user] = Some(u.delta.norm());
                }
                next.delay_s += slot_seconds;
            }
            for &i in &selected {
                next.bandit.record(i, *slot_seconds);
            }
        }
        ChannelSpec::Ideal | ChannelSpec::Orthogonal(_) => {
            let mut encoded = Vec::with_capacity(updates.len());
            for u in &updates {
                encoded.push(encode(u, pipeline, round)?);
            }
            let delays = match &pipeline.channel {
                ChannelSpec::Orthogonal(o) => {
                    let blocks = o.interference.len();
                    let mut rates = Vec::with_capacity(encoded.len());
                    for e in &encoded {
                        let link = o.link(e.user);
                        let row = (0..blocks)
                            .map(|b| link_rate(&link, b))
                            .collect::<Result<Vec<f64>>>()?;
                        rates.push(row);
                    }
                    let block_of = match o.assignment {
                        AssignmentRule::InOrder => (0..encoded.len()).collect(),
                        AssignmentRule::MinMax => {
                            let bits: Vec<u64> = encoded.iter().map(|e| e.bit_cost.max(1)).collect();
                            assign_blocks(&DelayMatrix::from_rates(&bits, &rates)?)?.block_of
                        }
                    };
                    let mut delays = Vec::with_capacity(encoded.len());
                    for (j, e) in encoded.iter().enumerate() {
                        delays.push(orthogonal_transmit(e.clone(), rates[j][block_of[j]])?.delay);
                    }
                    delays
                }
                _ => vec![0.0; encoded.len()],
            };
            next.delay_s += delays.iter().copied().fold(0.0, f64::max);
            for (e, d) in encoded.iter().zip(&delays) {
                next.bits += e.bit_cost;
                next.bandit.record(e.user, *d);
            }
            for e in &encoded {
                let delta = decode(e, pipeline, round)?;
                next.last_norms[e.user] = Some(crate::model::ParamVector::from(delta.clone()).norm());
                received.push(Received {
                    user: e.user,
                    delta,
                    samples: e.samples,
                    scheduled: true,
                });
            }
            if pipeline.exclusion == Exclusion::ZeroPayload {
                let dim = fed.param_dim(&pipeline.loss);
                for i in (0..fed.users()).filter(|i| !scheduled[*i]) {
                    let zero = ModelUpdate::new(ParamVector::zeros(dim), i, round, 0);
                    received.push(Received {
                        user: i,
                        delta: EncodedUpdate::dense(&zero).reconstruct()?,
                        samples: 0,
                        scheduled: false,
                    });
                }
                received.sort_by_key(|r| r.user);
            }
            for g in 0..fed.group_count() {
                if let Some(theta) = combine_group(&received, &next.reported, pipeline, fed, g, &state.models[g])? {
                    next.models[g] = theta;
                }
            }
        }
    }

    for (g, m) in next.models.iter().enumerate() {
        if !m.is_finite() {
            return Err(crate::error::invalid(
                "model",
                alloc::format!("group {g} diverged to a non-finite model in round {round}"),
            ));
        }
    }
    next.round = round;
    next.step = round * schedule.local_steps;
    let row = evaluate(&next, pipeline, fed, selected)?;
    next.history.push(row);
    Ok(next)
}

/// Combines group `g`'s scheduled rows; `None` when nobody in the group was scheduled.
fn combine_group(
    received: &[Received],
    reported: &[usize],
    pipeline: &Pipeline,
    fed: &Federation,
    g: usize,
    reference: &ParamVector,
) -> Result<Option<ParamVector>> {
    let members = fed.members(g);
    let total: usize = members.iter().map(|i| reported[*i]).sum();
    let rows: Vec<&Received> = received
        .iter()
        .filter(|r| fed.groups[r.user] == g && r.scheduled)
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let weights = rows
        .iter()
        .map(|r| if total == 0 { 1.0 / members.len() as f64 } else { r.samples as f64 / total as f64 })
        .collect();
    let batch = UpdateBatch::new(
        rows.iter().map(|r| r.delta.clone()).collect(),
        rows.iter().map(|r| r.user).collect(),
        weights,
        reference.clone(),
    )?;
    let population = members.len();
    let theta: ParamVector = match pipeline.combiner {
        CombinerSpec::FedAvg { variant } => fedavg_combine(&batch, population, variant)?,
        CombinerSpec::Median { weighting } => {
            offset(reference, median_combine(&batch.robust_view(weighting, population))?)
        }
        CombinerSpec::TrimmedMean { beta, weighting } => offset(
            reference,
            trimmed_mean_combine(&batch.robust_view(weighting, population), beta)?,
        ),
        CombinerSpec::Krum { f, weighting } => {
            offset(reference, krum_combine(&batch.robust_view(weighting, population), f)?.0)
        }
    };
    Ok(Some(theta))
}

fn offset(reference: &[f64], delta: Vec<f64>) -> ParamVector {
    reference.iter().zip(delta).map(|(r, d)| r + d).collect()
}

/// Metrics of the current models: weighted training loss over all users and,
/// when test data is present, test loss and accuracy.
fn evaluate(state: &RoundState, pipeline: &Pipeline, fed: &Federation, participants: Vec<usize>) -> Result<MetricsRecord> {
    let spec = &pipeline.loss;
    let total: usize = fed.datasets.iter().map(|d| d.len()).sum();
    let mut train_loss = 0.0;
    for (i, ds) in fed.datasets.iter().enumerate() {
        let theta = &state.models[fed.groups[i]];
        train_loss += ds.len() as f64 / total as f64 * local_loss(theta, ds, spec)?;
    }

    let (mut test_loss, mut test_acc) = (None, None);
    let mixture = if state.models.len() > 1 { cluster_set(state, fed) } else { None };
    if !fed.test.is_empty() && (state.models.len() == 1 || mixture.is_some()) {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for s in &fed.test {
            let prediction = match &mixture {
                Some(set) => mixture_predict(&s.input, set, spec)?,
                None => spec.predict(&state.models[0], &s.input),
            };
            loss += spec.prediction_loss(&prediction, s.label);
            if spec.classify(&prediction) == Some(s.label) {
                correct += 1;
            }
        }
        let m = fed.test.len() as f64;
        test_loss = Some(loss / m);
        if spec.kind.is_classifier() {
            test_acc = Some(correct as f64 / m);
        }
    }

    let mut bounds = Vec::new();
    if let Some(report) = &pipeline.bounds {
        for kind in &report.kinds {
            bounds.push(kind.evaluate(&report.params, state.step)?);
        }
    }
    Ok(MetricsRecord {
        round: state.round,
        step: state.step,
        delay_s: state.delay_s,
        bits: state.bits,
        train_loss,
        test_loss,
        test_acc,
        participants,
        bounds,
    })
}
