//! Ground-truth environment for the energy-harvesting status-update system.
//!
//! A source holds an energy buffer of size `B`, pays `E_s` units per sample,
//! and talks to the sink over a finite-state fading channel. Per slot the
//! source either idles (age grows) or samples (age resets on a successful
//! transmission). Energy arrivals are Bernoulli with a possibly time-varying
//! rate, and the channel-state distribution may drift as well; both are
//! described by a [`ParamSchedule`].
//!
//! The module provides the exact per-slot transition kernels (used by the
//! solvers and by the variation-budget accounting) and a seeded simulator
//! whose random streams are split by purpose, so different policies can be
//! compared on identical arrival/channel/success realizations.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 1-based slot index.
pub type Slot = u64;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid channel model: {0}")]
    InvalidChannel(String),
    #[error("invalid source model: {0}")]
    InvalidModel(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("slot index must be >= 1")]
    InvalidSlot,
    #[error("infeasible action: {0}")]
    InfeasibleAction(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

// ---------------------------------------------------------------------------
// Models and states
// ---------------------------------------------------------------------------

/// Finite-state fading channel: state `j` delivers a packet with
/// probability `success_probs[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub success_probs: Vec<f64>,
}

impl ChannelModel {
    pub fn new(success_probs: Vec<f64>) -> Result<Self, EnvError> {
        if success_probs.is_empty() {
            return Err(EnvError::InvalidChannel("need at least one state".into()));
        }
        if success_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(EnvError::InvalidChannel(
                "success probabilities must lie in [0,1]".into(),
            ));
        }
        Ok(Self { success_probs })
    }

    pub fn state_count(&self) -> usize {
        self.success_probs.len()
    }
}

/// Static description of one energy-harvesting source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    /// Energy buffer capacity `B`.
    pub buffer: u32,
    /// Energy spent per sample, `E_s`.
    pub sample_cost: u32,
    /// Age saturation cap `K_max`.
    pub age_cap: u32,
    pub channel: ChannelModel,
}

impl SourceModel {
    pub fn new(
        buffer: u32,
        sample_cost: u32,
        age_cap: u32,
        channel: ChannelModel,
    ) -> Result<Self, EnvError> {
        if sample_cost < 1 || buffer < sample_cost {
            return Err(EnvError::InvalidModel(format!(
                "need B >= E_s >= 1, got B={buffer}, E_s={sample_cost}"
            )));
        }
        if age_cap < 2 {
            return Err(EnvError::InvalidModel(format!(
                "need K_max >= 2, got {age_cap}"
            )));
        }
        Ok(Self {
            buffer,
            sample_cost,
            age_cap,
            channel,
        })
    }

    pub fn space(&self) -> StateSpace {
        StateSpace {
            buffer: self.buffer,
            age_cap: self.age_cap,
            channels: self.channel.state_count(),
        }
    }
}

/// Per-source state without the channel component: energy in `0..=B`,
/// age in `1..=K_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceState {
    pub energy: u32,
    pub age: u32,
}

/// Full single-source state `(E, K, C)`; `channel` is a 0-based index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FullState {
    pub energy: u32,
    pub age: u32,
    pub channel: usize,
}

impl FullState {
    pub fn source(&self) -> SourceState {
        SourceState {
            energy: self.energy,
            age: self.age,
        }
    }
}

/// Probe/sample action pair `(b, a)`; sampling requires probing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Action {
    pub probe: bool,
    pub sample: bool,
}

impl Action {
    pub const IDLE: Action = Action {
        probe: false,
        sample: false,
    };
    pub const PROBE: Action = Action {
        probe: true,
        sample: false,
    };
    pub const SAMPLE: Action = Action {
        probe: true,
        sample: true,
    };

    /// Index into the 3-action per-source space: (0,0) -> 0, (1,0) -> 1, (1,1) -> 2.
    pub fn index3(&self) -> usize {
        match (self.probe, self.sample) {
            (false, false) => 0,
            (true, false) => 1,
            (true, true) => 2,
            (false, true) => unreachable!("sample without probe"),
        }
    }

    pub fn from_index3(idx: usize) -> Action {
        match idx {
            0 => Action::IDLE,
            1 => Action::PROBE,
            2 => Action::SAMPLE,
            _ => panic!("action index out of range"),
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.sample && !self.probe {
            return Err(EnvError::InfeasibleAction(
                "sampling requires probing".into(),
            ));
        }
        Ok(())
    }
}

/// Dimensions of the discrete state space, with flat-index helpers.
///
/// Full states are laid out as `((E * K_max + (K-1)) * m + C)`; source states
/// as `E * K_max + (K-1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateSpace {
    pub buffer: u32,
    pub age_cap: u32,
    pub channels: usize,
}

impl StateSpace {
    pub fn full_count(&self) -> usize {
        (self.buffer as usize + 1) * self.age_cap as usize * self.channels
    }

    pub fn source_count(&self) -> usize {
        (self.buffer as usize + 1) * self.age_cap as usize
    }

    pub fn full_index(&self, s: FullState) -> usize {
        debug_assert!(s.energy <= self.buffer);
        debug_assert!(s.age >= 1 && s.age <= self.age_cap);
        debug_assert!(s.channel < self.channels);
        (s.energy as usize * self.age_cap as usize + (s.age as usize - 1)) * self.channels
            + s.channel
    }

    pub fn source_index(&self, s: SourceState) -> usize {
        debug_assert!(s.energy <= self.buffer);
        debug_assert!(s.age >= 1 && s.age <= self.age_cap);
        s.energy as usize * self.age_cap as usize + (s.age as usize - 1)
    }

    pub fn full_state(&self, idx: usize) -> FullState {
        let channel = idx % self.channels;
        let rest = idx / self.channels;
        let age = (rest % self.age_cap as usize) as u32 + 1;
        let energy = (rest / self.age_cap as usize) as u32;
        FullState {
            energy,
            age,
            channel,
        }
    }

    pub fn source_state(&self, idx: usize) -> SourceState {
        let age = (idx % self.age_cap as usize) as u32 + 1;
        let energy = (idx / self.age_cap as usize) as u32;
        SourceState { energy, age }
    }

    pub fn full_states(&self) -> impl Iterator<Item = FullState> + '_ {
        (0..self.full_count()).map(|i| self.full_state(i))
    }

    pub fn source_states(&self) -> impl Iterator<Item = SourceState> + '_ {
        (0..self.source_count()).map(|i| self.source_state(i))
    }
}

// ---------------------------------------------------------------------------
// Parameter schedules
// ---------------------------------------------------------------------------

/// One sinusoidal component: `offset + amplitude * wave(2*pi*t / period)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub offset: f64,
    pub amplitude: f64,
    pub period: f64,
}

impl Sinusoid {
    fn cos_at(&self, t: Slot) -> f64 {
        self.offset + self.amplitude * (2.0 * std::f64::consts::PI * t as f64 / self.period).cos()
    }

    fn sin_at(&self, t: Slot) -> f64 {
        self.offset + self.amplitude * (2.0 * std::f64::consts::PI * t as f64 / self.period).sin()
    }

    fn range_ok(&self) -> bool {
        self.period > 0.0
            && self.offset - self.amplitude.abs() >= -1e-12
            && self.offset + self.amplitude.abs() <= 1.0 + 1e-12
    }
}

/// Time-indexed energy-arrival rate and channel-state distribution.
///
/// The `sinusoid` family follows the experiment convention: the arrival rate
/// rides a cosine and the probability of the *second* channel state rides a
/// sine (two channel states, `q1 = 1 - q2`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ParamSchedule {
    Constant { lambda: f64, q: Vec<f64> },
    Sinusoid { lambda: Sinusoid, q2: Sinusoid },
}

impl ParamSchedule {
    pub fn channel_count(&self) -> usize {
        match self {
            ParamSchedule::Constant { q, .. } => q.len(),
            ParamSchedule::Sinusoid { .. } => 2,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<(), EnvError> {
        match self {
            ParamSchedule::Constant { lambda, q } => {
                if !(0.0..=1.0).contains(lambda) {
                    return Err(EnvError::InvalidSchedule("lambda outside [0,1]".into()));
                }
                if q.len() != channels {
                    return Err(EnvError::DimensionMismatch(format!(
                        "q has {} entries, channel model has {}",
                        q.len(),
                        channels
                    )));
                }
                if q.iter().any(|&p| p < -1e-12) || (q.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(EnvError::InvalidSchedule(
                        "q must be a probability distribution".into(),
                    ));
                }
                Ok(())
            }
            ParamSchedule::Sinusoid { lambda, q2 } => {
                if channels != 2 {
                    return Err(EnvError::DimensionMismatch(
                        "sinusoid schedule requires exactly two channel states".into(),
                    ));
                }
                if !lambda.range_ok() || !q2.range_ok() {
                    return Err(EnvError::InvalidSchedule(
                        "sinusoid leaves [0,1] or has nonpositive period".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Evaluate the schedule at slot `t >= 1`, returning `(lambda_t, q_t)`.
    pub fn at(&self, t: Slot) -> Result<(f64, Vec<f64>), EnvError> {
        if t < 1 {
            return Err(EnvError::InvalidSlot);
        }
        match self {
            ParamSchedule::Constant { lambda, q } => Ok((*lambda, q.clone())),
            ParamSchedule::Sinusoid { lambda, q2 } => {
                let l = lambda.cos_at(t).clamp(0.0, 1.0);
                let q2v = q2.sin_at(t).clamp(0.0, 1.0);
                Ok((l, vec![1.0 - q2v, q2v]))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Exact transition kernels
// ---------------------------------------------------------------------------

/// Sparse next-state distributions per (state, action).
///
/// Rows for infeasible pairs (sampling with `E < E_s`) are absent. Every
/// present row sums to 1 and carries only strictly positive entries, so the
/// support matches exactly the reachable cases of the dynamics.
#[derive(Clone, Debug)]
pub struct TransitionKernel {
    pub state_count: usize,
    pub action_count: usize,
    rows: Vec<Option<Vec<(usize, f64)>>>,
}

impl TransitionKernel {
    pub fn row(&self, state: usize, action: usize) -> Option<&[(usize, f64)]> {
        self.rows[state * self.action_count + action].as_deref()
    }

    /// Largest absolute per-entry difference across all shared rows.
    pub fn max_entry_deviation(&self, other: &TransitionKernel) -> f64 {
        self.fold_rows(other, |acc, d| acc.max(d.abs()), f64::max)
    }

    /// Largest L1 row distance across all shared rows.
    pub fn max_row_l1(&self, other: &TransitionKernel) -> f64 {
        self.fold_rows(other, |acc, d| acc + d.abs(), f64::max)
    }

    fn fold_rows(
        &self,
        other: &TransitionKernel,
        entry: impl Fn(f64, f64) -> f64,
        combine: impl Fn(f64, f64) -> f64,
    ) -> f64 {
        assert_eq!(self.state_count, other.state_count);
        assert_eq!(self.action_count, other.action_count);
        let mut worst = 0.0f64;
        for (a, b) in self.rows.iter().zip(other.rows.iter()) {
            let (Some(a), Some(b)) = (a, b) else { continue };
            // Rows are sorted by next-state index; merge them.
            let mut acc = 0.0;
            let (mut i, mut j) = (0, 0);
            while i < a.len() || j < b.len() {
                let d = match (a.get(i), b.get(j)) {
                    (Some(&(ia, pa)), Some(&(ib, pb))) => {
                        if ia == ib {
                            i += 1;
                            j += 1;
                            pa - pb
                        } else if ia < ib {
                            i += 1;
                            pa
                        } else {
                            j += 1;
                            -pb
                        }
                    }
                    (Some(&(_, pa)), None) => {
                        i += 1;
                        pa
                    }
                    (None, Some(&(_, pb))) => {
                        j += 1;
                        -pb
                    }
                    (None, None) => break,
                };
                acc = entry(acc, d);
            }
            worst = combine(worst, acc);
        }
        worst
    }
}

fn push_prob(row: &mut Vec<(usize, f64)>, idx: usize, p: f64) {
    if p <= 0.0 {
        return;
    }
    // Clipping can collide successor states (e.g. E' = B with and without an
    // arrival); accumulate instead of duplicating.
    if let Some(entry) = row.iter_mut().find(|(i, _)| *i == idx) {
        entry.1 += p;
    } else {
        row.push((idx, p));
    }
}

fn finish_row(mut row: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    row.sort_by_key(|&(i, _)| i);
    debug_assert!((row.iter().map(|&(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
    row
}

/// Exact one-slot kernel over full states `(E, K, C)` with actions
/// `{idle, sample}`, for parameters `(lambda, q)` governing the next slot.
///
/// Idle rows split mass over (arrival) x (next channel); sampling rows over
/// (arrival) x (success under the *current* channel) x (next channel). The
/// age saturates at `K_max` and the energy is confined to `[0, B]`.
pub fn build_kernel(
    model: &SourceModel,
    lambda: f64,
    q: &[f64],
) -> Result<TransitionKernel, EnvError> {
    check_kernel_inputs(model, lambda, q)?;
    let space = model.space();
    let m = space.channels;
    let cap = model.buffer;
    let mut rows: Vec<Option<Vec<(usize, f64)>>> = vec![None; space.full_count() * 2];

    for s in space.full_states() {
        let idx = space.full_index(s);
        let k_up = s.age.saturating_add(1).min(model.age_cap);

        let mut idle = Vec::new();
        for (j, &qj) in q.iter().enumerate() {
            let e_up = (s.energy + 1).min(cap);
            push_prob(
                &mut idle,
                space.full_index(FullState { energy: e_up, age: k_up, channel: j }),
                qj * lambda,
            );
            push_prob(
                &mut idle,
                space.full_index(FullState { energy: s.energy, age: k_up, channel: j }),
                qj * (1.0 - lambda),
            );
        }
        rows[idx * 2] = Some(finish_row(idle));

        if s.energy >= model.sample_cost {
            let p = model.channel.success_probs[s.channel];
            let e_spent = s.energy - model.sample_cost;
            let e_spent_up = (e_spent + 1).min(cap);
            let mut sample = Vec::new();
            for (j, &qj) in q.iter().enumerate() {
                for (arrive, pa) in [(true, lambda), (false, 1.0 - lambda)] {
                    let e_next = if arrive { e_spent_up } else { e_spent };
                    push_prob(
                        &mut sample,
                        space.full_index(FullState { energy: e_next, age: 1, channel: j }),
                        qj * pa * p,
                    );
                    push_prob(
                        &mut sample,
                        space.full_index(FullState { energy: e_next, age: k_up, channel: j }),
                        qj * pa * (1.0 - p),
                    );
                }
            }
            rows[idx * 2 + 1] = Some(finish_row(sample));
        }
        let _ = m;
    }

    Ok(TransitionKernel {
        state_count: space.full_count(),
        action_count: 2,
        rows,
    })
}

/// Exact one-slot kernel over source states `(E, K)` with the three-action
/// space `{(0,0), (1,0), (1,1)}`, the channel marginalized out.
///
/// Probing alone does not change the dynamics; under `(1,1)` the success
/// probability is the q-weighted mean of the per-state success probabilities.
pub fn build_source_kernel(
    model: &SourceModel,
    lambda: f64,
    q: &[f64],
) -> Result<TransitionKernel, EnvError> {
    check_kernel_inputs(model, lambda, q)?;
    let space = model.space();
    let cap = model.buffer;
    let p_mean: f64 = q
        .iter()
        .zip(model.channel.success_probs.iter())
        .map(|(qj, pj)| qj * pj)
        .sum();
    let mut rows: Vec<Option<Vec<(usize, f64)>>> = vec![None; space.source_count() * 3];

    for s in space.source_states() {
        let idx = space.source_index(s);
        let k_up = s.age.saturating_add(1).min(model.age_cap);
        let e_up = (s.energy + 1).min(cap);

        let mut idle = Vec::new();
        push_prob(
            &mut idle,
            space.source_index(SourceState { energy: e_up, age: k_up }),
            lambda,
        );
        push_prob(
            &mut idle,
            space.source_index(SourceState { energy: s.energy, age: k_up }),
            1.0 - lambda,
        );
        let idle = finish_row(idle);
        rows[idx * 3] = Some(idle.clone());
        rows[idx * 3 + 1] = Some(idle);

        if s.energy >= model.sample_cost {
            let e_spent = s.energy - model.sample_cost;
            let e_spent_up = (e_spent + 1).min(cap);
            let mut sample = Vec::new();
            for (arrive, pa) in [(true, lambda), (false, 1.0 - lambda)] {
                let e_next = if arrive { e_spent_up } else { e_spent };
                push_prob(
                    &mut sample,
                    space.source_index(SourceState { energy: e_next, age: 1 }),
                    pa * p_mean,
                );
                push_prob(
                    &mut sample,
                    space.source_index(SourceState { energy: e_next, age: k_up }),
                    pa * (1.0 - p_mean),
                );
            }
            rows[idx * 3 + 2] = Some(finish_row(sample));
        }
    }

    Ok(TransitionKernel {
        state_count: space.source_count(),
        action_count: 3,
        rows,
    })
}

fn check_kernel_inputs(model: &SourceModel, lambda: f64, q: &[f64]) -> Result<(), EnvError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(EnvError::InvalidSchedule("lambda outside [0,1]".into()));
    }
    if q.len() != model.channel.state_count() {
        return Err(EnvError::DimensionMismatch(format!(
            "q has {} entries, channel model has {}",
            q.len(),
            model.channel.state_count()
        )));
    }
    if q.iter().any(|&p| p < -1e-12) || (q.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(EnvError::InvalidSchedule(
            "q must be a probability distribution".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Variation budgets
// ---------------------------------------------------------------------------

/// Temporal-drift accounting for a schedule over a horizon, together with the
/// kernel-level drift it induces.
///
/// `w_steps[i]` holds the largest per-entry kernel deviation between the
/// exact kernels of consecutive slots; this is the quantity the drift bound
/// `V_{w,t} <= V_{lambda,t+1} + V_{q,t+1}` controls. The full L1 row
/// distances are kept alongside as `w_l1_steps` for diagnostics.
#[derive(Clone, Debug)]
pub struct VariationBudgets {
    pub v_lambda: f64,
    pub v_q: f64,
    pub v_w: f64,
    /// `|lambda_{t+1} - lambda_t|` for `t = 1..=T-1`.
    pub lambda_steps: Vec<f64>,
    /// `max_j |q_{j,t+1} - q_{j,t}|` for `t = 1..=T-1`.
    pub q_steps: Vec<f64>,
    /// Per-slot kernel drift, aligned with `lambda_steps`/`q_steps`.
    pub w_steps: Vec<f64>,
    pub w_l1_steps: Vec<f64>,
    /// Whether `w_steps[i] <= lambda_steps[i] + q_steps[i]` held at every slot.
    pub bound_holds: bool,
}

/// Variation budgets against the full-state single-source kernel.
pub fn variation_budgets(
    model: &SourceModel,
    schedule: &ParamSchedule,
    horizon: Slot,
) -> Result<VariationBudgets, EnvError> {
    budgets_impl(model, schedule, horizon, build_kernel)
}

/// Variation budgets against the per-source three-action kernel.
pub fn variation_budgets_source(
    model: &SourceModel,
    schedule: &ParamSchedule,
    horizon: Slot,
) -> Result<VariationBudgets, EnvError> {
    budgets_impl(model, schedule, horizon, build_source_kernel)
}

fn budgets_impl(
    model: &SourceModel,
    schedule: &ParamSchedule,
    horizon: Slot,
    build: fn(&SourceModel, f64, &[f64]) -> Result<TransitionKernel, EnvError>,
) -> Result<VariationBudgets, EnvError> {
    if horizon < 2 {
        return Err(EnvError::InvalidSchedule("horizon must be >= 2".into()));
    }
    let steps = (horizon - 1) as usize;
    let mut lambda_steps = Vec::with_capacity(steps);
    let mut q_steps = Vec::with_capacity(steps);
    let mut w_steps = Vec::with_capacity(steps);
    let mut w_l1_steps = Vec::with_capacity(steps);

    let (mut lambda_prev, mut q_prev) = schedule.at(1)?;
    // The slot-t kernel moves the state into slot t+1, so it is built from
    // the slot-(t+1) parameters.
    let mut kernel_prev = build(model, lambda_prev, &q_prev)?;
    let mut bound_holds = true;

    for t in 1..horizon {
        let (lambda_next, q_next) = schedule.at(t + 1)?;
        let dl = (lambda_next - lambda_prev).abs();
        let dq = q_next
            .iter()
            .zip(q_prev.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        lambda_steps.push(dl);
        q_steps.push(dq);

        let kernel_next = build(model, lambda_next, &q_next)?;
        let dw = kernel_prev.max_entry_deviation(&kernel_next);
        let dw_l1 = kernel_prev.max_row_l1(&kernel_next);
        if dw > dl + dq + 1e-12 {
            bound_holds = false;
        }
        w_steps.push(dw);
        w_l1_steps.push(dw_l1);

        lambda_prev = lambda_next;
        q_prev = q_next;
        kernel_prev = kernel_next;
    }

    Ok(VariationBudgets {
        v_lambda: lambda_steps.iter().sum(),
        v_q: q_steps.iter().sum(),
        v_w: w_steps.iter().sum(),
        lambda_steps,
        q_steps,
        w_steps,
        w_l1_steps,
        bound_holds,
    })
}

// ---------------------------------------------------------------------------
// Seeded simulation
// ---------------------------------------------------------------------------

/// How the per-slot cost is booked.
///
/// `Expected` charges `K (1 - a * p(C))`, the single-stage cost the Bellman
/// equations optimize; `Realized` charges `K` whenever no fresh update lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Expected,
    Realized,
}

/// What one simulated slot produced for one source.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub cost: f64,
    pub next: FullState,
    pub success: bool,
    pub arrivals: u32,
}

/// Independent random-stream purposes; each (run, source, purpose) triple
/// gets its own generator so policy choices never desynchronize the
/// environment draws.
#[derive(Clone, Copy, Debug)]
pub enum StreamPurpose {
    Arrival,
    Channel,
    Success,
    Master,
    ProbeChoice,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Arrival => 0x61,
            StreamPurpose::Channel => 0x62,
            StreamPurpose::Success => 0x63,
            StreamPurpose::Master => 0x64,
            StreamPurpose::ProbeChoice => 0x65,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministically derive the generator for one named stream.
pub fn stream_rng(seed: u64, source: usize, purpose: StreamPurpose) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(splitmix64(seed) ^ (source as u64)) ^ purpose.tag());
    ChaCha8Rng::seed_from_u64(mixed)
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    // 53 mantissa bits of one u64 draw; in [0, 1).
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u = uniform(rng);
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

/// Seeded multi-source simulator. Holds the true (possibly hidden) channel
/// state of every source and advances all sources jointly; every slot
/// consumes exactly one draw per (source, arrival/channel/success) stream
/// regardless of the chosen actions.
pub struct Sim {
    models: Vec<SourceModel>,
    schedules: Vec<ParamSchedule>,
    cost_mode: CostMode,
    states: Vec<FullState>,
    now: Slot,
    arrival_rng: Vec<ChaCha8Rng>,
    channel_rng: Vec<ChaCha8Rng>,
    success_rng: Vec<ChaCha8Rng>,
}

impl Sim {
    /// Start at slot 1 with full buffers, age 1, and `C(1) ~ q_1`.
    pub fn new(
        models: Vec<SourceModel>,
        schedules: Vec<ParamSchedule>,
        cost_mode: CostMode,
        seed: u64,
    ) -> Result<Sim, EnvError> {
        let initial: Vec<SourceState> = models
            .iter()
            .map(|m| SourceState {
                energy: m.buffer,
                age: 1,
            })
            .collect();
        Sim::with_initial(models, schedules, cost_mode, seed, &initial)
    }

    pub fn with_initial(
        models: Vec<SourceModel>,
        schedules: Vec<ParamSchedule>,
        cost_mode: CostMode,
        seed: u64,
        initial: &[SourceState],
    ) -> Result<Sim, EnvError> {
        if models.is_empty() || models.len() != schedules.len() || models.len() != initial.len() {
            return Err(EnvError::DimensionMismatch(
                "models, schedules and initial states must align".into(),
            ));
        }
        for (m, s) in models.iter().zip(schedules.iter()) {
            s.validate(m.channel.state_count())?;
        }
        let mut arrival_rng = Vec::new();
        let mut channel_rng = Vec::new();
        let mut success_rng = Vec::new();
        let mut states = Vec::new();
        for (i, (m, init)) in models.iter().zip(initial.iter()).enumerate() {
            if init.energy > m.buffer || init.age < 1 || init.age > m.age_cap {
                return Err(EnvError::InvalidModel("initial state out of range".into()));
            }
            arrival_rng.push(stream_rng(seed, i, StreamPurpose::Arrival));
            let mut ch = stream_rng(seed, i, StreamPurpose::Channel);
            let (_, q1) = schedules[i].at(1)?;
            let c0 = sample_categorical(&mut ch, &q1);
            channel_rng.push(ch);
            success_rng.push(stream_rng(seed, i, StreamPurpose::Success));
            states.push(FullState {
                energy: init.energy,
                age: init.age,
                channel: c0,
            });
        }
        Ok(Sim {
            models,
            schedules,
            cost_mode,
            states,
            now: 1,
            arrival_rng,
            channel_rng,
            success_rng,
        })
    }

    pub fn now(&self) -> Slot {
        self.now
    }

    pub fn source_count(&self) -> usize {
        self.models.len()
    }

    pub fn model(&self, i: usize) -> &SourceModel {
        &self.models[i]
    }

    /// Ground-truth state of source `i` at the current slot (the channel
    /// component is only observable to a policy through probing).
    pub fn state(&self, i: usize) -> FullState {
        self.states[i]
    }

    pub fn success_prob(&self, i: usize) -> f64 {
        self.models[i].channel.success_probs[self.states[i].channel]
    }

    /// Advance every source one slot under the given actions.
    pub fn advance(&mut self, actions: &[Action]) -> Result<Vec<StepOutcome>, EnvError> {
        if actions.len() != self.models.len() {
            return Err(EnvError::DimensionMismatch(
                "one action per source required".into(),
            ));
        }
        let t = self.now;
        let mut outcomes = Vec::with_capacity(actions.len());
        for (i, action) in actions.iter().enumerate() {
            action.validate()?;
            let model = &self.models[i];
            let state = self.states[i];
            if action.sample && state.energy < model.sample_cost {
                return Err(EnvError::InfeasibleAction(format!(
                    "source {i}: sampling with E={} < E_s={}",
                    state.energy, model.sample_cost
                )));
            }

            let (lambda_t, _) = self.schedules[i].at(t)?;
            let (_, q_next) = self.schedules[i].at(t + 1)?;
            let arrived = uniform(&mut self.arrival_rng[i]) < lambda_t;
            let next_channel = sample_categorical(&mut self.channel_rng[i], &q_next);
            let success_draw = uniform(&mut self.success_rng[i]);

            let p = model.channel.success_probs[state.channel];
            let success = action.sample && success_draw < p;
            let cost = match (self.cost_mode, action.sample) {
                (CostMode::Expected, true) => state.age as f64 * (1.0 - p),
                (CostMode::Realized, true) => {
                    if success {
                        0.0
                    } else {
                        state.age as f64
                    }
                }
                (_, false) => state.age as f64,
            };

            let spent = if action.sample { model.sample_cost } else { 0 };
            let next = FullState {
                energy: (state.energy - spent + arrived as u32).min(model.buffer),
                age: if success {
                    1
                } else {
                    state.age.saturating_add(1).min(model.age_cap)
                },
                channel: next_channel,
            };
            self.states[i] = next;
            outcomes.push(StepOutcome {
                cost,
                next,
                success,
                arrivals: arrived as u32,
            });
        }
        self.now += 1;
        Ok(outcomes)
    }

    /// Single-source convenience wrapper around [`Sim::advance`].
    pub fn step_single(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        debug_assert_eq!(self.models.len(), 1);
        Ok(self.advance(&[action])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinusoid_schedule() -> ParamSchedule {
        ParamSchedule::Sinusoid {
            lambda: Sinusoid {
                offset: 0.3,
                amplitude: 0.2,
                period: 4.0,
            },
            q2: Sinusoid {
                offset: 0.5,
                amplitude: 0.2,
                period: 4.0,
            },
        }
    }

    fn two_state_model() -> SourceModel {
        SourceModel::new(7, 1, 10, ChannelModel::new(vec![0.8, 0.2]).unwrap()).unwrap()
    }

    #[test]
    fn sinusoid_evaluates_to_named_values() {
        let sched = sinusoid_schedule();
        let (l4, q4) = sched.at(4).unwrap();
        assert!((l4 - 0.5).abs() < 1e-12);
        assert!((q4[1] - 0.5).abs() < 1e-12);

        let lambdas: Vec<f64> = (1..=4).map(|t| sched.at(t).unwrap().0).collect();
        let expect = [0.3, 0.1, 0.3, 0.5];
        for (got, want) in lambdas.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_schedule_is_flat_and_rejects_slot_zero() {
        let sched = ParamSchedule::Constant {
            lambda: 0.3,
            q: vec![0.5, 0.5],
        };
        for t in 1..50 {
            assert_eq!(sched.at(t).unwrap().0, 0.3);
        }
        assert!(sched.at(0).is_err());
    }

    #[test]
    fn kernel_case1_probabilities() {
        // E < E_s idle row: arrival and next channel are independent.
        let model = two_state_model();
        let kernel = build_kernel(&model, 0.5, &[0.5, 0.5]).unwrap();
        let space = model.space();
        let s = FullState { energy: 0, age: 3, channel: 0 };
        let row = kernel.row(space.full_index(s), 0).unwrap();
        assert_eq!(row.len(), 4);
        for j in 0..2 {
            let up = space.full_index(FullState { energy: 1, age: 4, channel: j });
            let flat = space.full_index(FullState { energy: 0, age: 4, channel: j });
            let get = |idx: usize| row.iter().find(|&&(i, _)| i == idx).unwrap().1;
            assert!((get(up) - 0.25).abs() < 1e-12);
            assert!((get(flat) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_zero_rate_and_perfect_channel_prune_support() {
        let model = two_state_model();
        let space = model.space();

        // lambda = 0: only the E' = E (idle) and E' = E - E_s (sample) branches.
        let kernel = build_kernel(&model, 0.0, &[0.5, 0.5]).unwrap();
        let s = FullState { energy: 3, age: 2, channel: 1 };
        for &(idx, _) in kernel.row(space.full_index(s), 0).unwrap() {
            assert_eq!(space.full_state(idx).energy, 3);
        }
        for &(idx, _) in kernel.row(space.full_index(s), 1).unwrap() {
            assert_eq!(space.full_state(idx).energy, 2);
        }

        // p = 1 everywhere: no failure branch, next age always 1.
        let perfect =
            SourceModel::new(7, 1, 10, ChannelModel::new(vec![1.0, 1.0]).unwrap()).unwrap();
        let kernel = build_kernel(&perfect, 0.5, &[0.5, 0.5]).unwrap();
        for &(idx, _) in kernel.row(space.full_index(s), 1).unwrap() {
            assert_eq!(space.full_state(idx).age, 1);
        }
    }

    #[test]
    fn kernel_rows_are_distributions() {
        let model = two_state_model();
        for (lambda, q) in [(0.0, [0.3, 0.7]), (0.37, [1.0, 0.0]), (1.0, [0.5, 0.5])] {
            let kernel = build_kernel(&model, lambda, &q).unwrap();
            let space = model.space();
            for s in 0..space.full_count() {
                for a in 0..2 {
                    if let Some(row) = kernel.row(s, a) {
                        let sum: f64 = row.iter().map(|&(_, p)| p).sum();
                        assert!((sum - 1.0).abs() < 1e-12);
                        assert!(row.iter().all(|&(_, p)| p > 0.0));
                    } else {
                        assert_eq!(a, 1);
                        assert!(space.full_state(s).energy < model.sample_cost);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_rejects_dimension_mismatch() {
        let model = two_state_model();
        assert!(build_kernel(&model, 0.5, &[1.0]).is_err());
    }

    #[test]
    fn step_idle_and_sample_costs() {
        let model = two_state_model();
        let sched = ParamSchedule::Constant { lambda: 0.5, q: vec![0.5, 0.5] };
        let mut sim = Sim::with_initial(
            vec![model],
            vec![sched],
            CostMode::Expected,
            7,
            &[SourceState { energy: 3, age: 5 }],
        )
        .unwrap();

        // Force a known channel for the cost assertion.
        sim.states[0].channel = 0; // p = 0.8
        let before = sim.state(0);
        let out = sim.step_single(Action::SAMPLE).unwrap();
        assert!((out.cost - 5.0 * 0.2).abs() < 1e-12);
        assert_eq!(before.energy - 1 + out.arrivals, out.next.energy);

        let mut sim2 = Sim::with_initial(
            vec![two_state_model()],
            vec![ParamSchedule::Constant { lambda: 0.5, q: vec![0.5, 0.5] }],
            CostMode::Expected,
            7,
            &[SourceState { energy: 3, age: 5 }],
        )
        .unwrap();
        let out = sim2.step_single(Action::PROBE).unwrap();
        assert_eq!(out.cost, 5.0);
        assert_eq!(out.next.age, 6);
        assert!(out.next.energy == 3 || out.next.energy == 4);
    }

    #[test]
    fn step_rejects_underfunded_sample() {
        let model = two_state_model();
        let sched = ParamSchedule::Constant { lambda: 0.5, q: vec![0.5, 0.5] };
        let mut sim = Sim::with_initial(
            vec![model],
            vec![sched],
            CostMode::Expected,
            1,
            &[SourceState { energy: 0, age: 1 }],
        )
        .unwrap();
        assert!(sim.step_single(Action::SAMPLE).is_err());
    }

    #[test]
    fn empirical_step_frequencies_match_kernel_row() {
        let model = two_state_model();
        let lambda = 0.35;
        let q = vec![0.6, 0.4];
        let kernel = build_kernel(&model, lambda, &q).unwrap();
        let space = model.space();
        let from = FullState { energy: 4, age: 3, channel: 1 };

        let mut counts = vec![0u64; space.full_count()];
        let n = 100_000;
        let sched = ParamSchedule::Constant { lambda, q: q.clone() };
        let mut sim = Sim::new(
            vec![model.clone()],
            vec![sched],
            CostMode::Expected,
            42,
            )
        .unwrap();
        for _ in 0..n {
            sim.states[0] = from;
            let out = sim.step_single(Action::SAMPLE).unwrap();
            counts[space.full_index(out.next)] += 1;
        }

        let row = kernel.row(space.full_index(from), 1).unwrap();
        let mut tv = 0.0;
        let mut seen = vec![false; space.full_count()];
        for &(idx, p) in row {
            seen[idx] = true;
            tv += (p - counts[idx] as f64 / n as f64).abs();
        }
        for (idx, &c) in counts.iter().enumerate() {
            if !seen[idx] && c > 0 {
                tv += c as f64 / n as f64;
            }
        }
        assert!(tv / 2.0 < 0.01, "total variation {tv}");
    }

    #[test]
    fn rollout_respects_state_bounds_and_energy_drain() {
        let model = two_state_model();
        let mut sim = Sim::new(
            vec![model.clone()],
            vec![sinusoid_schedule()],
            CostMode::Expected,
            3,
        )
        .unwrap();
        for t in 0..2000u64 {
            let s = sim.state(0);
            assert!(s.energy <= model.buffer);
            assert!(s.age >= 1 && s.age <= model.age_cap);
            let act = if s.energy >= model.sample_cost && t % 3 == 0 {
                Action::SAMPLE
            } else {
                Action::PROBE
            };
            let out = sim.step_single(act).unwrap();
            if !act.sample {
                assert!(out.next.energy >= s.energy);
            }
            assert!(out.success <= act.sample);
        }
    }

    #[test]
    fn budgets_constant_schedule_is_stationary() {
        let model = two_state_model();
        let sched = ParamSchedule::Constant { lambda: 0.4, q: vec![0.5, 0.5] };
        let b = variation_budgets(&model, &sched, 100).unwrap();
        assert_eq!(b.v_lambda, 0.0);
        assert_eq!(b.v_q, 0.0);
        assert_eq!(b.v_w, 0.0);
        assert!(b.bound_holds);
    }

    #[test]
    fn budgets_sinusoid_match_closed_form() {
        let model = two_state_model();
        let b = variation_budgets(&model, &sinusoid_schedule(), 5000).unwrap();
        assert!((b.v_lambda - 999.8).abs() < 1e-6, "v_lambda = {}", b.v_lambda);
        assert!((b.v_q - 999.8).abs() < 1e-6, "v_q = {}", b.v_q);
        assert!(b.bound_holds);

        let bs = variation_budgets_source(&model, &sinusoid_schedule(), 5000).unwrap();
        assert!(bs.bound_holds);
    }

    #[test]
    fn identical_seeds_share_environment_draws() {
        let mk = || {
            Sim::new(
                vec![two_state_model()],
                vec![sinusoid_schedule()],
                CostMode::Expected,
                99,
            )
            .unwrap()
        };
        let mut a = mk();
        let mut b = mk();
        // Different actions, same draws: arrivals and next channels coincide.
        for t in 0..500u64 {
            let act_a = if a.state(0).energy >= 1 && t % 2 == 0 {
                Action::SAMPLE
            } else {
                Action::PROBE
            };
            let out_a = a.step_single(act_a).unwrap();
            let out_b = b.step_single(Action::PROBE).unwrap();
            assert_eq!(out_a.arrivals, out_b.arrivals);
            assert_eq!(out_a.next.channel, out_b.next.channel);
        }
    }
}
