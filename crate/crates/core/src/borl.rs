//! Bandit-over-learning: an EXP3.P master that picks the sliding-window size
//! per block when no variation budget is known.
//!
//! The horizon splits into blocks of length `L`. Each block draws an arm
//! (a window exponent), restarts the sliding-window learner with that window
//! for the block, and feeds the normalized block cost back to the master.
//! Arm `l` maps to the window `floor(L^{l / Delta_W})`.

use crate::env::{CostMode, ParamSchedule, SourceModel};
use crate::learner::{LearnError, RunError, SingleSourceRunner, SwUcrl2Config};
use crate::trace::{BlockRecord, RunTrace};
use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the arm-count exponent is chosen.
///
/// `Log` uses `Delta_W = floor(ln L)`, which spaces the candidate windows
/// geometrically and keeps the exploration rate inside `[0,1]`; `Literal`
/// uses `Delta_W = L`, which mostly duplicates tiny windows and drives the
/// exploration formula past 1 (it is clamped there).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaWMode {
    Log,
    Literal,
}

/// Orientation of the block feedback handed to EXP3.P.
///
/// `Reward` converts the normalized block cost `c` into the gain `1 - c`;
/// `Literal` feeds `c` itself, as the update is printed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    Reward,
    Literal,
}

/// Block length, arm set, and the candidate windows they map to.
#[derive(Clone, Debug)]
pub struct BorlConfig {
    pub block_len: u64,
    /// Window exponent granularity `Delta_W`.
    pub exponent_steps: u32,
    /// Arm count `Delta = Delta_W + 1`.
    pub arm_count: usize,
    /// Window per arm: `windows[l] = floor(L^{l / Delta_W})`.
    pub windows: Vec<u64>,
    /// Deduplicated ascending window sizes.
    pub candidates: Vec<u64>,
}

/// Block length `L = floor(3 (B / K_max)^{2/3} A^{1/2} T^{1/2})` (clamped to
/// `[1, T]`) and the arm/window layout derived from it.
pub fn borl_config(
    buffer: u32,
    age_cap: u32,
    action_count: u32,
    horizon: u64,
    mode: DeltaWMode,
) -> BorlConfig {
    let l = (3.0 * (buffer as f64 / age_cap as f64).powf(2.0 / 3.0)
        * (action_count as f64).sqrt()
        * (horizon as f64).sqrt())
    .floor() as u64;
    let block_len = l.clamp(1, horizon);
    let exponent_steps = if block_len <= 1 {
        0
    } else {
        match mode {
            DeltaWMode::Log => ((block_len as f64).ln().floor() as u32).max(1),
            DeltaWMode::Literal => block_len as u32,
        }
    };
    let arm_count = exponent_steps as usize + 1;
    let windows: Vec<u64> = (0..=exponent_steps)
        .map(|k| {
            if exponent_steps == 0 {
                block_len
            } else {
                (block_len as f64)
                    .powf(k as f64 / exponent_steps as f64)
                    .floor() as u64
            }
        })
        .map(|w| w.clamp(1, block_len))
        .collect();
    let mut candidates = windows.clone();
    candidates.sort_unstable();
    candidates.dedup();
    BorlConfig {
        block_len,
        exponent_steps,
        arm_count,
        windows,
        candidates,
    }
}

/// EXP3.P master state over window arms.
#[derive(Clone, Debug)]
pub struct Exp3pState {
    pub scores: Vec<f64>,
    pub learning_rate: f64,
    pub bias: f64,
    pub exploration: f64,
}

/// Parameters for `Delta` arms over `ceil(T / L)` blocks:
/// `alpha = 0.95 sqrt(ln Delta / (Delta ceil(T/L)))`, `beta` likewise without
/// the 0.95, and `gamma = 1.05 sqrt(Delta ln Delta / ceil(T/L))` clamped to 1.
pub fn exp3p_init(arm_count: usize, horizon: u64, block_len: u64) -> Exp3pState {
    assert!(arm_count >= 1 && block_len >= 1 && horizon >= 1);
    let rounds = horizon.div_ceil(block_len) as f64;
    let delta = arm_count as f64;
    let ln_delta = delta.ln();
    Exp3pState {
        scores: vec![0.0; arm_count],
        learning_rate: 0.95 * (ln_delta / (delta * rounds)).sqrt(),
        bias: (ln_delta / (delta * rounds)).sqrt(),
        exploration: (1.05 * (delta * ln_delta / rounds).sqrt()).min(1.0),
    }
}

/// Arm distribution `chi_l = (1-gamma) softmax(alpha g)_l + gamma / Delta`,
/// computed overflow-safely.
pub fn exp3p_distribution(state: &Exp3pState) -> Vec<f64> {
    let shift = state
        .scores
        .iter()
        .map(|&g| state.learning_rate * g)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = state
        .scores
        .iter()
        .map(|&g| (state.learning_rate * g - shift).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let delta = state.scores.len() as f64;
    weights
        .iter()
        .map(|w| (1.0 - state.exploration) * w / total + state.exploration / delta)
        .collect()
}

/// Fold one block's cost into the scores. Every arm accrues the bias term;
/// the chosen arm additionally accrues the normalized feedback, importance
/// weighted by its selection probability.
pub fn exp3p_update(
    state: &mut Exp3pState,
    chi: &[f64],
    chosen: usize,
    block_cost: f64,
    normalizer: f64,
    feedback: FeedbackMode,
) -> Result<(), LearnError> {
    if !(0.0..=normalizer * (1.0 + 1e-12)).contains(&block_cost) {
        return Err(LearnError::Invalid(format!(
            "block cost {block_cost} outside [0, {normalizer}]"
        )));
    }
    let normalized = (block_cost / normalizer).clamp(0.0, 1.0);
    let gain = match feedback {
        FeedbackMode::Reward => 1.0 - normalized,
        FeedbackMode::Literal => normalized,
    };
    for (l, score) in state.scores.iter_mut().enumerate() {
        let ind = if l == chosen { gain } else { 0.0 };
        *score += (state.bias + ind) / chi[l];
    }
    Ok(())
}

pub(crate) fn draw_arm(rng: &mut ChaCha8Rng, chi: &[f64]) -> usize {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let mut acc = 0.0;
    for (i, &p) in chi.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    chi.len() - 1
}

/// Generic block loop: draw an arm, run the block with the arm's window,
/// feed the cost back. `run_block(block_index, window, slots)` returns the
/// block's cost; `normalizer` caps a single block's cost (`L * K_max`).
pub fn run_blocks<F>(
    config: &BorlConfig,
    horizon: u64,
    normalizer: f64,
    feedback: FeedbackMode,
    master: &mut ChaCha8Rng,
    mut run_block: F,
) -> Result<Vec<BlockRecord>, RunError>
where
    F: FnMut(u64, u64, u64) -> Result<f64, RunError>,
{
    let mut state = exp3p_init(config.arm_count, horizon, config.block_len);
    let blocks = horizon.div_ceil(config.block_len);
    let mut records = Vec::with_capacity(blocks as usize);
    for block in 1..=blocks {
        let chi = exp3p_distribution(&state);
        let arm = draw_arm(master, &chi);
        let window = config.windows[arm];
        let start = (block - 1) * config.block_len;
        let slots = config.block_len.min(horizon - start);
        let cost = run_block(block, window, slots)?;
        exp3p_update(&mut state, &chi, arm, cost, normalizer, feedback)?;
        records.push(BlockRecord {
            block,
            arm,
            window,
            block_cost: cost,
        });
    }
    Ok(records)
}

/// Full single-source bandit-over-learning run (the learner restarts at each
/// block boundary with the chosen window; the environment keeps going).
#[allow(clippy::too_many_arguments)]
pub fn run_borl_single(
    model: &SourceModel,
    schedule: &ParamSchedule,
    cost_mode: CostMode,
    seed: u64,
    horizon: u64,
    delta: f64,
    use_threshold: bool,
    radius_scale: f64,
    delta_w_mode: DeltaWMode,
    feedback: FeedbackMode,
    algorithm: &str,
) -> Result<RunTrace, RunError> {
    let config = borl_config(model.buffer, model.age_cap, 2, horizon, delta_w_mode);
    let mut master = crate::env::stream_rng(seed, 0, crate::env::StreamPurpose::Master);
    let mut runner = SingleSourceRunner::new(model.clone(), schedule.clone(), cost_mode, seed)?;
    let normalizer = config.block_len as f64 * model.age_cap as f64;
    let blocks = run_blocks(
        &config,
        horizon,
        normalizer,
        feedback,
        &mut master,
        |_, window, slots| {
            let cfg = SwUcrl2Config {
                window,
                delta,
                use_threshold,
                radius_scale,
                evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
            };
            runner.run_ucrl2_block(&cfg, slots)
        },
    )?;
    let mut trace = runner.into_trace(algorithm, seed);
    trace.blocks = blocks;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ChannelModel, Sinusoid, StreamPurpose};
    use crate::learner::run_sw_ucrl2;

    #[test]
    fn block_length_and_window_grid_match_hand_values() {
        let cfg = borl_config(7, 10, 2, 5000, DeltaWMode::Log);
        assert_eq!(cfg.block_len, 236);
        assert_eq!(cfg.exponent_steps, 5);
        assert_eq!(cfg.arm_count, 6);
        assert_eq!(cfg.windows, vec![1, 2, 8, 26, 79, 236]);
        assert_eq!(cfg.candidates, vec![1, 2, 8, 26, 79, 236]);
    }

    #[test]
    fn degenerate_horizon_yields_single_window() {
        let cfg = borl_config(7, 10, 2, 1, DeltaWMode::Log);
        assert_eq!(cfg.block_len, 1);
        assert_eq!(cfg.windows, vec![1]);
        assert_eq!(cfg.candidates, vec![1]);
    }

    #[test]
    fn exp3p_parameters_match_hand_values() {
        // Delta = 6, ceil(T/L) = 22.
        let s = exp3p_init(6, 5000, 236);
        let want = 1.05 * (6.0 * 6.0f64.ln() / 22.0).sqrt();
        assert!((s.exploration - want).abs() < 1e-12);
        assert!((s.exploration - 0.734).abs() < 1e-3);
        // Huge arm count clamps gamma to 1.
        let s = exp3p_init(237, 5000, 236);
        assert_eq!(s.exploration, 1.0);
    }

    #[test]
    fn distribution_is_uniform_at_zero_scores_and_floored() {
        let s = exp3p_init(6, 5000, 236);
        let chi = exp3p_distribution(&s);
        for &p in &chi {
            assert!((p - 1.0 / 6.0).abs() < 1e-12);
        }

        let mut s = exp3p_init(5, 10_000, 100);
        s.scores = vec![10.0, 0.0, 0.0, 0.0, 0.0];
        s.learning_rate = 0.1;
        s.exploration = 0.2;
        let chi = exp3p_distribution(&s);
        let e1 = 1.0f64.exp();
        let want = 0.8 * e1 / (e1 + 4.0) + 0.04;
        assert!((chi[0] - want).abs() < 1e-12);
        assert!((chi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let floor = s.exploration / 5.0;
        assert!(chi.iter().all(|&p| p >= floor - 1e-15));
    }

    #[test]
    fn update_extremes_only_accrue_bias_or_full_gain() {
        let normalizer = 100.0;
        let mut s = exp3p_init(2, 1000, 10);
        let chi = exp3p_distribution(&s);
        // Worst block: only the bias term accrues.
        exp3p_update(&mut s, &chi, 0, normalizer, normalizer, FeedbackMode::Reward).unwrap();
        assert!((s.scores[0] - s.bias / chi[0]).abs() < 1e-12);
        assert!((s.scores[1] - s.bias / chi[1]).abs() < 1e-12);
        // Perfect block: chosen arm gains (bias + 1) / chi.
        let mut s2 = exp3p_init(2, 1000, 10);
        exp3p_update(&mut s2, &chi, 0, 0.0, normalizer, FeedbackMode::Reward).unwrap();
        assert!((s2.scores[0] - (s2.bias + 1.0) / chi[0]).abs() < 1e-12);
        // Out-of-range cost is rejected.
        assert!(exp3p_update(&mut s2, &chi, 0, 101.0, normalizer, FeedbackMode::Reward).is_err());
    }

    #[test]
    fn two_arm_toy_concentrates_on_the_cheap_arm() {
        // Arm 0 always costs 0, arm 1 always the maximum. Averaged over ten
        // seeds the cheap arm's probability exceeds 0.8 after 200 blocks.
        let normalizer = 10.0;
        let mut mean_p0 = 0.0;
        for seed in 0..10u64 {
            let mut rng = crate::env::stream_rng(seed, 0, StreamPurpose::Master);
            let mut s = exp3p_init(2, 200, 1);
            let mut chi = exp3p_distribution(&s);
            for _ in 0..200 {
                chi = exp3p_distribution(&s);
                assert!((chi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let floor = s.exploration / 2.0;
                assert!(chi.iter().all(|&p| p >= floor - 1e-15));
                let arm = draw_arm(&mut rng, &chi);
                let cost = if arm == 0 { 0.0 } else { normalizer };
                exp3p_update(&mut s, &chi, arm, cost, normalizer, FeedbackMode::Reward).unwrap();
            }
            mean_p0 += chi[0];
        }
        mean_p0 /= 10.0;
        assert!(mean_p0 > 0.8, "mean selection probability {mean_p0}");
    }

    #[test]
    fn single_arm_borl_reproduces_plain_run() {
        let model =
            SourceModel::new(7, 1, 10, ChannelModel::new(vec![0.8, 0.2]).unwrap()).unwrap();
        let sched = ParamSchedule::Sinusoid {
            lambda: Sinusoid { offset: 0.3, amplitude: 0.2, period: 4.0 },
            q2: Sinusoid { offset: 0.5, amplitude: 0.2, period: 4.0 },
        };
        let horizon = 300;
        // One block covering the horizon, single arm W = T.
        let config = BorlConfig {
            block_len: horizon,
            exponent_steps: 0,
            arm_count: 1,
            windows: vec![horizon],
            candidates: vec![horizon],
        };
        let mut master = crate::env::stream_rng(5, 0, StreamPurpose::Master);
        let mut runner =
            SingleSourceRunner::new(model.clone(), sched.clone(), CostMode::Expected, 5).unwrap();
        let normalizer = config.block_len as f64 * model.age_cap as f64;
        run_blocks(
            &config,
            horizon,
            normalizer,
            FeedbackMode::Reward,
            &mut master,
            |_, window, slots| {
                let cfg = SwUcrl2Config {
                    window,
                    delta: 0.05,
                    use_threshold: true,
                    radius_scale: 1.0,
                    evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
                };
                runner.run_ucrl2_block(&cfg, slots)
            },
        )
        .unwrap();
        let borl_trace = runner.into_trace("aec-borl", 5);

        let cfg = SwUcrl2Config {
            window: horizon,
            delta: 0.05,
            use_threshold: true,
            radius_scale: 1.0,
            evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
        };
        let plain =
            run_sw_ucrl2(&model, &sched, CostMode::Expected, 5, horizon, &cfg, "aec").unwrap();
        assert_eq!(borl_trace.cum_curve, plain.cum_curve);
    }
}
