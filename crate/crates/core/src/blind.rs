//! Standard (channel-agnostic) sliding-window learner for one source.
//!
//! The vanilla algorithm has no notion of the probe-then-decide structure:
//! it acts on the observable-without-probing state `(E, K)`, so its sampling
//! decision cannot condition on the current channel. Transitions are
//! estimated over the marginal state space and the sampling cost is modeled
//! certainty-equivalently as `K (1 - p_hat)` with `p_hat` the windowed
//! success rate of its own transmissions (Laplace-smoothed). Episode and
//! window mechanics match the channel-aware learner.

use crate::env::{Action, CostMode, ParamSchedule, Sim, Slot, SourceModel};
use crate::learner::{
    confidence_radius, episode_boundary, evi, EviProblem, EviRegion, LearnError, RunError,
};
use crate::trace::{RunTrace, SlotRecord};

#[derive(Clone, Debug)]
pub struct BlindConfig {
    pub window: u64,
    pub delta: f64,
    pub radius_scale: f64,
    pub evi_sweep_cap: usize,
}

#[derive(Clone, Copy)]
struct BlindRecord {
    state: usize,
    action: usize,
    next: usize,
    sampled: bool,
    succeeded: bool,
}

struct BlindEpisode {
    start: Slot,
    visit_counts: Vec<u32>,
    transition_counts: Vec<Vec<(usize, u32)>>,
    in_episode: Vec<u32>,
    success_rate: f64,
    policy: Option<Vec<usize>>,
}

/// Owns a single-source simulation driven by the channel-blind learner.
pub struct BlindRunner {
    sim: Sim,
    model: SourceModel,
    records: Vec<SlotRecord>,
    cum_cost: f64,
    episodes_done: u64,
}

impl BlindRunner {
    pub fn new(
        model: SourceModel,
        schedule: ParamSchedule,
        cost_mode: CostMode,
        seed: u64,
    ) -> Result<Self, RunError> {
        let sim = Sim::new(vec![model.clone()], vec![schedule], cost_mode, seed)?;
        Ok(BlindRunner {
            sim,
            model,
            records: Vec::new(),
            cum_cost: 0.0,
            episodes_done: 0,
        })
    }

    pub fn into_trace(self, algorithm: &str, seed: u64) -> RunTrace {
        let cum_curve = self.records.iter().map(|r| r.cum_cost).collect();
        RunTrace {
            algorithm: algorithm.to_string(),
            seed,
            sources: 1,
            records: self.records,
            blocks: Vec::new(),
            cum_curve,
        }
    }

    pub fn run_block(&mut self, cfg: &BlindConfig, slots: u64) -> Result<f64, RunError> {
        if cfg.window < 1 {
            return Err(LearnError::Invalid("window must be >= 1".into()).into());
        }
        let space = self.model.space();
        let n = space.source_count();
        let mut history: Vec<BlindRecord> = Vec::with_capacity(slots as usize);
        let mut block_cost = 0.0;

        let mut episode = self.start_episode(1, cfg, &history);
        for t in 1..=slots {
            let mut action = self.decide(&mut episode, cfg)?;
            if t > episode.start {
                let state_idx = space.source_index(self.sim.state(0).source());
                let pair = state_idx * 2 + action;
                if episode_boundary(
                    t,
                    cfg.window,
                    episode.in_episode[pair],
                    episode.visit_counts[pair].max(1),
                ) {
                    self.episodes_done += 1;
                    episode = self.start_episode(t, cfg, &history);
                    action = self.decide(&mut episode, cfg)?;
                }
            }

            let state = self.sim.state(0);
            let state_idx = space.source_index(state.source());
            let env_action = if action == 1 { Action::SAMPLE } else { Action::PROBE };
            let out = self.sim.step_single(env_action)?;
            history.push(BlindRecord {
                state: state_idx,
                action,
                next: space.source_index(out.next.source()),
                sampled: action == 1,
                succeeded: out.success,
            });
            episode.in_episode[state_idx * 2 + action] += 1;
            block_cost += out.cost;
            self.cum_cost += out.cost;
            self.records.push(SlotRecord {
                t: self.records.len() as u64 + 1,
                episode: self.episodes_done + 1,
                source: 0,
                energy: state.energy,
                age: state.age,
                channel: state.channel + 1,
                probe: 0,
                sample: action as u8,
                success: out.success as u8,
                cost: out.cost,
                cum_cost: self.cum_cost,
                cum_cost_avg: self.cum_cost,
            });
            let _ = n;
        }
        self.episodes_done += 1;
        Ok(block_cost)
    }

    fn start_episode(
        &self,
        start: Slot,
        cfg: &BlindConfig,
        history: &[BlindRecord],
    ) -> BlindEpisode {
        let space = self.model.space();
        let n = space.source_count();
        let ledge = start.saturating_sub(cfg.window).max(1);
        let mut visit_counts = vec![0u32; n * 2];
        let mut transition_counts = vec![Vec::new(); n * 2];
        let mut samples = 0u64;
        let mut successes = 0u64;
        for h in ledge..start {
            let Some(rec) = history.get(h as usize - 1) else { break };
            let pair = rec.state * 2 + rec.action;
            visit_counts[pair] += 1;
            let row: &mut Vec<(usize, u32)> = &mut transition_counts[pair];
            match row.binary_search_by_key(&rec.next, |&(s, _)| s) {
                Ok(i) => row[i].1 += 1,
                Err(i) => row.insert(i, (rec.next, 1)),
            }
            samples += rec.sampled as u64;
            successes += rec.succeeded as u64;
        }
        BlindEpisode {
            start,
            visit_counts,
            transition_counts,
            in_episode: vec![0; n * 2],
            success_rate: (successes as f64 + 1.0) / (samples as f64 + 2.0),
            policy: None,
        }
    }

    fn decide(&mut self, episode: &mut BlindEpisode, cfg: &BlindConfig) -> Result<usize, RunError> {
        let state = self.sim.state(0);
        if state.energy < self.model.sample_cost {
            return Ok(0);
        }
        if episode.policy.is_none() {
            episode.policy = Some(self.optimistic_policy(episode, cfg)?);
        }
        let space = self.model.space();
        Ok(episode.policy.as_ref().unwrap()[space.source_index(state.source())])
    }

    fn optimistic_policy(
        &self,
        episode: &BlindEpisode,
        cfg: &BlindConfig,
    ) -> Result<Vec<usize>, RunError> {
        let space = self.model.space();
        let n = space.source_count();
        let mut costs = vec![0.0f64; n * 2];
        let mut regions = Vec::with_capacity(n * 2);
        for idx in 0..n {
            let s = space.source_state(idx);
            costs[idx * 2] = s.age as f64;
            costs[idx * 2 + 1] = if s.energy >= self.model.sample_cost {
                s.age as f64 * (1.0 - episode.success_rate)
            } else {
                f64::INFINITY
            };
            for a in 0..2 {
                let counts = &episode.transition_counts[idx * 2 + a];
                let (center, radius) = if counts.is_empty() {
                    (None, 2.0)
                } else {
                    let r = cfg.radius_scale
                        * confidence_radius(
                            n,
                            2,
                            episode.start,
                            cfg.delta,
                            episode.visit_counts[idx * 2 + a].max(1),
                        )?;
                    let total: u32 = counts.iter().map(|&(_, c)| c).sum();
                    (
                        Some(
                            counts
                                .iter()
                                .map(|&(s, c)| (s, c as f64 / total as f64))
                                .collect(),
                        ),
                        r,
                    )
                };
                regions.push(EviRegion { center, radius });
            }
        }
        let problem = EviProblem {
            state_count: n,
            action_count: 2,
            costs,
            regions,
        };
        let epsilon = 1.0 / (episode.start as f64).sqrt();
        let result = evi(&problem, epsilon, cfg.evi_sweep_cap)?;
        Ok(result.policy)
    }
}

/// Run the blind learner over a horizon with a fixed window.
pub fn run_blind(
    model: &SourceModel,
    schedule: &ParamSchedule,
    cost_mode: CostMode,
    seed: u64,
    horizon: u64,
    cfg: &BlindConfig,
    algorithm: &str,
) -> Result<RunTrace, RunError> {
    let mut runner = BlindRunner::new(model.clone(), schedule.clone(), cost_mode, seed)?;
    runner.run_block(cfg, horizon)?;
    Ok(runner.into_trace(algorithm, seed))
}

/// Bandit-over-learning over the blind learner.
#[allow(clippy::too_many_arguments)]
pub fn run_blind_borl(
    model: &SourceModel,
    schedule: &ParamSchedule,
    cost_mode: CostMode,
    seed: u64,
    horizon: u64,
    cfg: &BlindConfig,
    delta_w_mode: crate::borl::DeltaWMode,
    feedback: crate::borl::FeedbackMode,
    algorithm: &str,
) -> Result<RunTrace, RunError> {
    let config = crate::borl::borl_config(model.buffer, model.age_cap, 2, horizon, delta_w_mode);
    let mut master = crate::env::stream_rng(seed, 0, crate::env::StreamPurpose::Master);
    let mut runner = BlindRunner::new(model.clone(), schedule.clone(), cost_mode, seed)?;
    let normalizer = config.block_len as f64 * model.age_cap as f64;
    let blocks = crate::borl::run_blocks(
        &config,
        horizon,
        normalizer,
        feedback,
        &mut master,
        |_, window, slots| {
            let mut block_cfg = cfg.clone();
            block_cfg.window = window;
            runner.run_block(&block_cfg, slots)
        },
    )?;
    let mut trace = runner.into_trace(algorithm, seed);
    trace.blocks = blocks;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ChannelModel, Sinusoid};

    #[test]
    fn blind_runner_is_reproducible_and_never_reads_the_channel() {
        let model =
            SourceModel::new(7, 1, 10, ChannelModel::new(vec![0.8, 0.2]).unwrap()).unwrap();
        let sched = ParamSchedule::Sinusoid {
            lambda: Sinusoid { offset: 0.3, amplitude: 0.2, period: 4.0 },
            q2: Sinusoid { offset: 0.5, amplitude: 0.2, period: 4.0 },
        };
        let cfg = BlindConfig {
            window: 40,
            delta: 0.05,
            radius_scale: 0.05,
            evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
        };
        let a = run_blind(&model, &sched, CostMode::Expected, 3, 400, &cfg, "sw-ucrl2").unwrap();
        let b = run_blind(&model, &sched, CostMode::Expected, 3, 400, &cfg, "sw-ucrl2").unwrap();
        assert_eq!(a.cum_curve, b.cum_curve);
        // Sampling decisions cannot depend on the channel: group the slots
        // by (E, K, episode) and check the action is constant per group.
        use std::collections::HashMap;
        let mut groups: HashMap<(u32, u32, u64), u8> = HashMap::new();
        for r in &a.records {
            let key = (r.energy, r.age, r.episode);
            if let Some(prev) = groups.insert(key, r.sample) {
                assert_eq!(prev, r.sample, "channel leaked into the blind policy");
            }
        }
    }
}
