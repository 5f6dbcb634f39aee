//! Multi-source scheduling under the one-probe-per-slot constraint.
//!
//! Each source carries its own sliding-window statistics over the state
//! space `(E, K)` and the three-action space `{(0,0), (1,0), (1,1)}`. At an
//! episode start the scheduler re-estimates every source's arrival rate and
//! channel distribution, recomputes the per-state Whittle tables by solving
//! the charged subproblem under the frozen estimates, and then probes the
//! energized source with the highest index each slot. The probed source
//! samples if its age clears the posterior/channel threshold, otherwise it
//! defers to an optimistic per-source policy from extended value iteration.
//!
//! Swapping the probe and sample rules yields the reference schedulers
//! (maximum-age probing, uniform-random probing) on the same machinery.

use crate::env::{
    Action, CostMode, ParamSchedule, Sim, Slot, SourceModel, SourceState, StreamPurpose,
};
use crate::learner::{
    aec_threshold, confidence_radius, evi, EviProblem, EviRegion, LearnError, RunError,
};
use crate::solver::{whittle_table, SubproblemSolution, ThresholdTables, WhittleTable};
use crate::trace::{RunTrace, SlotRecord};
use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;

/// What one source remembers about one executed slot.
#[derive(Clone, Copy, Debug)]
pub struct MultiHistoryRecord {
    /// Source-state index of `(E, K)` at the slot.
    pub state: usize,
    /// Action index per [`Action::index3`].
    pub action: usize,
    pub next: usize,
    pub arrival: bool,
    /// Observed channel state when this source was probed.
    pub probed_channel: Option<usize>,
}

/// Windowed counters of one source.
#[derive(Clone, Debug)]
pub struct SourceStats {
    pub state_count: usize,
    /// Windowed arrival count `e_i`.
    pub arrival_count: u64,
    /// Windowed probe count (slots with `b_i = 1`).
    pub probe_count: u64,
    /// Per-channel observation counts `o_{j,i}`.
    pub channel_counts: Vec<u64>,
    /// Windowed visit counts `N_i(s, b, a)`.
    pub visit_counts: Vec<u32>,
    /// Within-episode visit counts `f_i(s, b, a)`.
    pub episode_counts: Vec<u32>,
    pub transition_counts: Vec<Vec<(usize, u32)>>,
}

impl SourceStats {
    fn empty(state_count: usize, channels: usize) -> SourceStats {
        SourceStats {
            state_count,
            arrival_count: 0,
            probe_count: 0,
            channel_counts: vec![0; channels],
            visit_counts: vec![0; state_count * 3],
            episode_counts: vec![0; state_count * 3],
            transition_counts: vec![Vec::new(); state_count * 3],
        }
    }

    pub fn visit_plus(&self, state: usize, action: usize) -> u32 {
        self.visit_counts[state * 3 + action].max(1)
    }

    /// Channel-state estimate `q_hat`; uniform until the source has been
    /// probed at least once.
    pub fn channel_estimate(&self) -> Vec<f64> {
        let m = self.channel_counts.len();
        if self.probe_count == 0 {
            return vec![1.0 / m as f64; m];
        }
        self.channel_counts
            .iter()
            .map(|&c| c as f64 / self.probe_count as f64)
            .collect()
    }

    pub fn transition_estimate(&self, state: usize, action: usize) -> Option<Vec<(usize, f64)>> {
        let counts = &self.transition_counts[state * 3 + action];
        if counts.is_empty() {
            return None;
        }
        let total: u32 = counts.iter().map(|&(_, c)| c).sum();
        Some(
            counts
                .iter()
                .map(|&(s, c)| (s, c as f64 / total as f64))
                .collect(),
        )
    }
}

/// Windowed estimates for all sources at slot `t` of the episode starting at
/// `episode_start`; `n_t` (the shared slot count) is the same for every
/// source, probe/channel counts are per source.
#[derive(Clone, Debug)]
pub struct MultiStats {
    pub window: u64,
    pub episode_start: Slot,
    /// Shared windowed slot count `n_t`.
    pub slot_count: u64,
    pub per_source: Vec<SourceStats>,
}

impl MultiStats {
    pub fn arrival_rate(&self, source: usize) -> f64 {
        if self.slot_count == 0 {
            0.0
        } else {
            self.per_source[source].arrival_count as f64 / self.slot_count as f64
        }
    }
}

/// Evaluate the windowed estimators at slot `t`: arrivals, probes and
/// channel observations over `[max(tau-W,1), t]`, visit and transition
/// counts over `[max(tau-W,1), t-1]`, within-episode counts over
/// `[tau, t-1]`. `histories[i][h-1]` must describe slot `h` of source `i`.
pub fn sw_estimates_multi(
    histories: &[Vec<MultiHistoryRecord>],
    window: u64,
    t: Slot,
    episode_start: Slot,
    state_count: usize,
    channels: usize,
) -> MultiStats {
    assert!(t >= 1 && episode_start >= 1);
    let ledge = episode_start.saturating_sub(window).max(1);
    let mut per_source = Vec::with_capacity(histories.len());
    for history in histories {
        let mut s = SourceStats::empty(state_count, channels);
        for h in ledge..=t {
            let Some(rec) = history.get(h as usize - 1) else { break };
            s.arrival_count += rec.arrival as u64;
            if let Some(c) = rec.probed_channel {
                s.probe_count += 1;
                s.channel_counts[c] += 1;
            }
            if h <= t - 1 {
                let pair = rec.state * 3 + rec.action;
                s.visit_counts[pair] += 1;
                if h >= episode_start {
                    s.episode_counts[pair] += 1;
                }
                let row = &mut s.transition_counts[pair];
                match row.binary_search_by_key(&rec.next, |&(sx, _)| sx) {
                    Ok(i) => row[i].1 += 1,
                    Err(i) => row.insert(i, (rec.next, 1)),
                }
            }
        }
        per_source.push(s);
    }
    MultiStats {
        window,
        episode_start,
        slot_count: t - ledge + 1,
        per_source,
    }
}

/// Episode-start snapshot: every counter over `[max(tau-W,1), tau-1]`.
fn episode_snapshot_multi(
    histories: &[Vec<MultiHistoryRecord>],
    window: u64,
    episode_start: Slot,
    state_count: usize,
    channels: usize,
) -> MultiStats {
    if episode_start == 1 {
        return MultiStats {
            window,
            episode_start,
            slot_count: 0,
            per_source: histories
                .iter()
                .map(|_| SourceStats::empty(state_count, channels))
                .collect(),
        };
    }
    let mut stats = sw_estimates_multi(
        histories,
        window,
        episode_start - 1,
        episode_start,
        state_count,
        channels,
    );
    // Visit/transition windows above end at tau-2; fold in slot tau-1.
    for (i, history) in histories.iter().enumerate() {
        if let Some(rec) = history.get(episode_start as usize - 2) {
            let pair = rec.state * 3 + rec.action;
            let s = &mut stats.per_source[i];
            s.visit_counts[pair] += 1;
            let row = &mut s.transition_counts[pair];
            match row.binary_search_by_key(&rec.next, |&(sx, _)| sx) {
                Ok(j) => row[j].1 += 1,
                Err(j) => row.insert(j, (rec.next, 1)),
            }
        }
    }
    stats
}

/// Per-episode Whittle table and sampling thresholds of one source under
/// frozen windowed estimates.
pub fn whittle_table_episode(
    model: &SourceModel,
    lambda_hat: f64,
    q_hat: &[f64],
    discount: f64,
    tol: f64,
) -> Result<(WhittleTable, ThresholdTables), RunError> {
    let (table, zero): (WhittleTable, SubproblemSolution) =
        whittle_table(model, lambda_hat, q_hat, discount, tol)?;
    let thresholds = zero.sample_thresholds(model);
    Ok((table, thresholds))
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

/// How the slot's single probe is assigned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeRule {
    /// Highest Whittle index among energized sources.
    WhittleIndex,
    /// Largest age among energized sources (ties to the smaller id).
    MaxAge,
    /// Uniformly random source, energized or not.
    UniformRandom,
}

/// How the probed source decides to sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleRule {
    /// Age threshold first, then the optimistic policy.
    ThresholdThenPolicy,
    /// Optimistic policy only.
    PolicyOnly,
    /// Sample whenever energized and the observed success probability
    /// reaches the given floor.
    FixedProb(f64),
}

#[derive(Clone, Debug)]
pub struct MultiConfig {
    pub window: u64,
    pub delta: f64,
    /// Discount used for the per-episode Whittle solves.
    pub discount: f64,
    /// Bisection tolerance for the per-episode Whittle solves.
    pub whittle_tol: f64,
    pub probe_rule: ProbeRule,
    pub sample_rule: SampleRule,
    /// Multiplier on the confidence radius (see the single-source learner).
    pub radius_scale: f64,
    pub evi_sweep_cap: usize,
}

struct SourceEpisode {
    arrivals: u64,
    visit_counts: Vec<u32>,
    transition_counts: Vec<Vec<(usize, u32)>>,
    in_episode: Vec<u32>,
    whittle: Option<WhittleTable>,
    /// Optimistic sample decision per (channel, state), built on demand.
    samplers: Vec<Option<Vec<bool>>>,
}

struct MultiEpisode {
    start: Slot,
    slots_prev: u64,
    per: Vec<SourceEpisode>,
}

/// Owns a multi-source simulation plus its trace; runs execute in blocks so
/// the bandit master can restart the learner with a new window.
pub struct MultiRunner {
    sim: Sim,
    models: Vec<SourceModel>,
    records: Vec<SlotRecord>,
    cum_costs: Vec<f64>,
    cum_curve: Vec<f64>,
    episodes_done: u64,
    probe_rng: ChaCha8Rng,
}

impl MultiRunner {
    pub fn new(
        models: Vec<SourceModel>,
        schedules: Vec<ParamSchedule>,
        cost_mode: CostMode,
        seed: u64,
    ) -> Result<Self, RunError> {
        let initial: Vec<SourceState> = models
            .iter()
            .map(|m| SourceState { energy: m.buffer, age: 1 })
            .collect();
        Self::with_initial(models, schedules, cost_mode, seed, &initial)
    }

    pub fn with_initial(
        models: Vec<SourceModel>,
        schedules: Vec<ParamSchedule>,
        cost_mode: CostMode,
        seed: u64,
        initial: &[SourceState],
    ) -> Result<Self, RunError> {
        let n = models.len();
        let sim = Sim::with_initial(models.clone(), schedules, cost_mode, seed, initial)?;
        Ok(MultiRunner {
            sim,
            models,
            records: Vec::new(),
            cum_costs: vec![0.0; n],
            cum_curve: Vec::new(),
            episodes_done: 0,
            probe_rng: stream_rng_for_probe(seed),
        })
    }

    pub fn into_trace(self, algorithm: &str, seed: u64) -> RunTrace {
        RunTrace {
            algorithm: algorithm.to_string(),
            seed,
            sources: self.models.len(),
            records: self.records,
            blocks: Vec::new(),
            cum_curve: self.cum_curve,
        }
    }

    /// Run the scheduler for `slots` slots with fresh statistics; returns the
    /// cost summed over sources accrued in this block.
    pub fn run_block(&mut self, cfg: &MultiConfig, slots: u64) -> Result<f64, RunError> {
        if cfg.window < 1 {
            return Err(LearnError::Invalid("window must be >= 1".into()).into());
        }
        let n = self.models.len();
        let mut histories: Vec<Vec<MultiHistoryRecord>> =
            vec![Vec::with_capacity(slots as usize); n];
        let mut block_cost = 0.0;

        let mut episode = self.start_episode(1, cfg, &histories)?;
        for t in 1..=slots {
            let mut decision = self.decide(&mut episode, cfg, t)?;
            if t > episode.start {
                let boundary = t % cfg.window == 0
                    || (0..n).any(|i| {
                        let pair = self.pair_index(i, decision.actions[i]);
                        let ep = &episode.per[i];
                        ep.in_episode[pair]
                            > ep.visit_counts[pair].max(1)
                    });
                if boundary {
                    self.episodes_done += 1;
                    episode = self.start_episode(t, cfg, &histories)?;
                    decision = self.decide(&mut episode, cfg, t)?;
                }
            }

            let states: Vec<_> = (0..n).map(|i| self.sim.state(i)).collect();
            let outcomes = self.sim.advance(&decision.actions)?;
            let mut avg_cum = 0.0;
            for i in 0..n {
                let space = self.models[i].space();
                let state_idx = space.source_index(states[i].source());
                let next_idx = space.source_index(outcomes[i].next.source());
                let action_idx = decision.actions[i].index3();
                histories[i].push(MultiHistoryRecord {
                    state: state_idx,
                    action: action_idx,
                    next: next_idx,
                    arrival: outcomes[i].arrivals > 0,
                    probed_channel: decision.actions[i]
                        .probe
                        .then_some(states[i].channel),
                });
                episode.per[i].in_episode[state_idx * 3 + action_idx] += 1;
                block_cost += outcomes[i].cost;
                self.cum_costs[i] += outcomes[i].cost;
            }
            for i in 0..n {
                avg_cum += self.cum_costs[i];
            }
            avg_cum /= n as f64;
            for i in 0..n {
                self.records.push(SlotRecord {
                    t: self.cum_curve.len() as u64 + 1,
                    episode: self.episodes_done + 1,
                    source: i,
                    energy: states[i].energy,
                    age: states[i].age,
                    channel: states[i].channel + 1,
                    probe: decision.actions[i].probe as u8,
                    sample: decision.actions[i].sample as u8,
                    success: outcomes[i].success as u8,
                    cost: outcomes[i].cost,
                    cum_cost: self.cum_costs[i],
                    cum_cost_avg: avg_cum,
                });
            }
            self.cum_curve.push(avg_cum);
        }
        self.episodes_done += 1;
        Ok(block_cost)
    }

    fn pair_index(&self, source: usize, action: Action) -> usize {
        let space = self.models[source].space();
        space.source_index(self.sim.state(source).source()) * 3 + action.index3()
    }

    fn start_episode(
        &mut self,
        start: Slot,
        cfg: &MultiConfig,
        histories: &[Vec<MultiHistoryRecord>],
    ) -> Result<MultiEpisode, RunError> {
        let n = self.models.len();
        let state_count = self.models[0].space().source_count();
        let channels = self.models[0].channel.state_count();
        let stats = episode_snapshot_multi(histories, cfg.window, start, state_count, channels);
        let mut per = Vec::with_capacity(n);
        for i in 0..n {
            let src = &stats.per_source[i];
            let whittle = if cfg.probe_rule == ProbeRule::WhittleIndex {
                let lambda_hat = stats.arrival_rate(i);
                let q_hat = src.channel_estimate();
                let (table, _) = whittle_table_episode(
                    &self.models[i],
                    lambda_hat,
                    &q_hat,
                    cfg.discount,
                    cfg.whittle_tol,
                )?;
                Some(table)
            } else {
                None
            };
            per.push(SourceEpisode {
                arrivals: src.arrival_count,
                visit_counts: src.visit_counts.clone(),
                transition_counts: src.transition_counts.clone(),
                in_episode: vec![0; state_count * 3],
                whittle,
                samplers: vec![None; channels],
            });
        }
        Ok(MultiEpisode {
            start,
            slots_prev: stats.slot_count,
            per,
        })
    }

    fn decide(
        &mut self,
        episode: &mut MultiEpisode,
        cfg: &MultiConfig,
        _t: Slot,
    ) -> Result<Decision, RunError> {
        let n = self.models.len();
        let mut actions = vec![Action::IDLE; n];

        let probed = match cfg.probe_rule {
            ProbeRule::WhittleIndex => {
                let mut best: Option<(usize, f64)> = None;
                for i in 0..n {
                    let s = self.sim.state(i);
                    if s.energy < self.models[i].sample_cost {
                        continue;
                    }
                    let index = episode.per[i]
                        .whittle
                        .as_ref()
                        .expect("whittle table computed at episode start")
                        .index(s.source());
                    let better = match best {
                        None => true,
                        Some((bi, bv)) => {
                            let bs = self.sim.state(bi);
                            index > bv
                                || (index == bv
                                    && (s.age > bs.age || (s.age == bs.age && i < bi)))
                        }
                    };
                    if better {
                        best = Some((i, index));
                    }
                }
                best.map(|(i, _)| i)
            }
            ProbeRule::MaxAge => {
                let mut best: Option<usize> = None;
                for i in 0..n {
                    let s = self.sim.state(i);
                    if s.energy < self.models[i].sample_cost {
                        continue;
                    }
                    if best.is_none_or(|b| s.age > self.sim.state(b).age) {
                        best = Some(i);
                    }
                }
                best
            }
            ProbeRule::UniformRandom => {
                let u = (self.probe_rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                Some(((u * n as f64) as usize).min(n - 1))
            }
        };

        if let Some(i) = probed {
            let state = self.sim.state(i);
            let energized = state.energy >= self.models[i].sample_cost;
            let p = self.sim.success_prob(i);
            let sample = match cfg.sample_rule {
                SampleRule::FixedProb(floor) => energized && p >= floor,
                SampleRule::ThresholdThenPolicy | SampleRule::PolicyOnly => {
                    if !energized {
                        false
                    } else {
                        let threshold_hit = cfg.sample_rule == SampleRule::ThresholdThenPolicy
                            && state.age as f64
                                >= aec_threshold(
                                    episode.per[i].arrivals,
                                    episode.slots_prev,
                                    state.energy,
                                    p,
                                );
                        if threshold_hit {
                            true
                        } else {
                            self.optimistic_sample(episode, cfg, i, state.channel)?
                        }
                    }
                }
            };
            actions[i] = if sample { Action::SAMPLE } else { Action::PROBE };
        }
        Ok(Decision { actions })
    }

    /// Sample decision of the optimistic per-source policy given the probed
    /// channel (the probe already happened, so only `(1,0)` vs `(1,1)` is
    /// compared; ties sample).
    fn optimistic_sample(
        &mut self,
        episode: &mut MultiEpisode,
        cfg: &MultiConfig,
        source: usize,
        channel: usize,
    ) -> Result<bool, RunError> {
        let model = &self.models[source];
        let space = model.space();
        let state_count = space.source_count();
        if episode.per[source].samplers[channel].is_none() {
            let p = model.channel.success_probs[channel];
            let mut costs = vec![0.0f64; state_count * 3];
            let mut regions = Vec::with_capacity(state_count * 3);
            for idx in 0..state_count {
                let s = space.source_state(idx);
                costs[idx * 3] = s.age as f64;
                costs[idx * 3 + 1] = s.age as f64;
                costs[idx * 3 + 2] = if s.energy >= model.sample_cost {
                    s.age as f64 * (1.0 - p)
                } else {
                    f64::INFINITY
                };
                for a in 0..3 {
                    let ep = &episode.per[source];
                    let counts = &ep.transition_counts[idx * 3 + a];
                    let (center, radius) = if counts.is_empty() {
                        (None, 2.0)
                    } else {
                        let r = cfg.radius_scale
                            * confidence_radius(
                                state_count,
                                3,
                                episode.start,
                                cfg.delta,
                                ep.visit_counts[idx * 3 + a].max(1),
                            )?;
                        let total: u32 = counts.iter().map(|&(_, c)| c).sum();
                        (
                            Some(
                                counts
                                    .iter()
                                    .map(|&(sx, c)| (sx, c as f64 / total as f64))
                                    .collect(),
                            ),
                            r,
                        )
                    };
                    regions.push(EviRegion { center, radius });
                }
            }
            let problem = EviProblem {
                state_count,
                action_count: 3,
                costs,
                regions,
            };
            let epsilon = 1.0 / (episode.start as f64).sqrt();
            let result = evi(&problem, epsilon, cfg.evi_sweep_cap)?;
            let sampler: Vec<bool> = (0..state_count)
                .map(|idx| {
                    let probe_idle = result.action_values[idx * 3 + 1];
                    let probe_sample = result.action_values[idx * 3 + 2];
                    probe_sample.is_finite() && probe_sample <= probe_idle
                })
                .collect();
            episode.per[source].samplers[channel] = Some(sampler);
        }
        let idx = space.source_index(self.sim.state(source).source());
        Ok(episode.per[source].samplers[channel].as_ref().unwrap()[idx])
    }
}

struct Decision {
    actions: Vec<Action>,
}

fn stream_rng_for_probe(seed: u64) -> ChaCha8Rng {
    crate::env::stream_rng(seed, usize::MAX, StreamPurpose::ProbeChoice)
}

/// Run a multi-source scheduler over a horizon with a fixed window.
#[allow(clippy::too_many_arguments)]
pub fn run_multi(
    models: &[SourceModel],
    schedules: &[ParamSchedule],
    cost_mode: CostMode,
    seed: u64,
    horizon: u64,
    cfg: &MultiConfig,
    algorithm: &str,
) -> Result<RunTrace, RunError> {
    let mut runner = MultiRunner::new(models.to_vec(), schedules.to_vec(), cost_mode, seed)?;
    runner.run_block(cfg, horizon)?;
    Ok(runner.into_trace(algorithm, seed))
}

/// Bandit-over-learning wrapper: block length from the largest buffer and
/// age cap, block feedback the source-averaged block cost.
#[allow(clippy::too_many_arguments)]
pub fn run_borl_multi(
    models: &[SourceModel],
    schedules: &[ParamSchedule],
    cost_mode: CostMode,
    seed: u64,
    horizon: u64,
    cfg: &MultiConfig,
    delta_w_mode: crate::borl::DeltaWMode,
    feedback: crate::borl::FeedbackMode,
    algorithm: &str,
) -> Result<RunTrace, RunError> {
    let max_buffer = models.iter().map(|m| m.buffer).max().unwrap();
    let max_age_cap = models.iter().map(|m| m.age_cap).max().unwrap();
    let config = crate::borl::borl_config(max_buffer, max_age_cap, 3, horizon, delta_w_mode);
    let mut master = crate::env::stream_rng(seed, 0, StreamPurpose::Master);
    let mut runner = MultiRunner::new(models.to_vec(), schedules.to_vec(), cost_mode, seed)?;
    let normalizer = config.block_len as f64 * max_age_cap as f64;
    let n = models.len() as f64;
    let blocks = crate::borl::run_blocks(
        &config,
        horizon,
        normalizer,
        feedback,
        &mut master,
        |_, window, slots| {
            let mut block_cfg = cfg.clone();
            block_cfg.window = window;
            Ok(runner.run_block(&block_cfg, slots)? / n)
        },
    )?;
    let mut trace = runner.into_trace(algorithm, seed);
    trace.blocks = blocks;
    Ok(trace)
}
