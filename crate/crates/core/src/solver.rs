//! Exact discounted-cost solvers for the stationary problem.
//!
//! Two Bellman systems live here. The single-source system acts on full
//! states `(E, K, C)` with actions `{idle, sample}`; its solution yields the
//! threshold tables `K_th(E, C)` and `p_th(E, K)`. The decoupled per-source
//! system acts on `(E, K)` with a probe charge: probing reveals the channel
//! and opens the sample/idle choice, and the charge at which probing stops
//! being worthwhile is the Whittle index of the state.
//!
//! All solvers are plain fixed-point iterations on dense tables; the
//! subproblem solver accepts a warm start because Whittle bisection and
//! indexability sweeps solve long series of nearby charges.

use crate::env::{FullState, SourceModel, SourceState, StateSpace};
use thiserror::Error;

/// Slack used when deciding indifference between probe and idle values.
const INDIFFERENCE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver input: {0}")]
    Invalid(String),
    #[error("no convergence within {0} sweeps; check the configuration")]
    NoConvergence(usize),
}

const SWEEP_CAP: usize = 1_000_000;

fn check_inputs(model: &SourceModel, lambda: f64, q: &[f64], discount: f64, tol: f64) -> Result<(), SolveError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SolveError::Invalid("lambda outside [0,1]".into()));
    }
    if q.len() != model.channel.state_count() {
        return Err(SolveError::Invalid("q does not match channel count".into()));
    }
    if q.iter().any(|&p| p < -1e-12) || (q.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SolveError::Invalid("q is not a distribution".into()));
    }
    if !(0.0..1.0).contains(&discount) {
        return Err(SolveError::Invalid("discount must lie in [0,1)".into()));
    }
    if tol <= 0.0 {
        return Err(SolveError::Invalid("tolerance must be positive".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Single-source value iteration
// ---------------------------------------------------------------------------

/// Converged value table over full states `(E, K, C)`.
#[derive(Clone, Debug)]
pub struct ValueFunction {
    pub space: StateSpace,
    pub discount: f64,
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Final sup-norm successive difference.
    pub residual: f64,
}

impl ValueFunction {
    pub fn value(&self, s: FullState) -> f64 {
        self.values[self.space.full_index(s)]
    }
}

/// Solve the single-source Bellman equation by value iteration, stopping
/// when the sup-norm successive difference drops below `tol`.
pub fn value_iteration(
    model: &SourceModel,
    lambda: f64,
    q: &[f64],
    discount: f64,
    tol: f64,
) -> Result<ValueFunction, SolveError> {
    check_inputs(model, lambda, q, discount, tol)?;
    let space = model.space();
    let n = space.full_count();
    let ages = space.age_cap as usize;
    let m = space.channels;
    let mut values = vec![0.0f64; n];
    // Channel-averaged continuation G(E, K) = sum_j q_j J(E, K, C_j).
    let mut avg = vec![0.0f64; space.source_count()];

    let mut iterations = 0;
    let mut residual;
    loop {
        iterations += 1;
        for e in 0..=space.buffer as usize {
            for k in 0..ages {
                let mut acc = 0.0;
                let base = (e * ages + k) * m;
                for (j, &qj) in q.iter().enumerate() {
                    acc += qj * values[base + j];
                }
                avg[e * ages + k] = acc;
            }
        }
        let cont = |e: u32, k: u32| -> f64 {
            let up = (e + 1).min(model.buffer);
            lambda * avg[up as usize * ages + (k as usize - 1)]
                + (1.0 - lambda) * avg[e as usize * ages + (k as usize - 1)]
        };

        residual = 0.0f64;
        for s in space.full_states() {
            let idx = space.full_index(s);
            let k_up = (s.age + 1).min(model.age_cap);
            let idle = s.age as f64 + discount * cont(s.energy, k_up);
            let new = if s.energy >= model.sample_cost {
                let p = model.channel.success_probs[s.channel];
                let e_spent = s.energy - model.sample_cost;
                let sampled = s.age as f64 * (1.0 - p)
                    + discount * (p * cont(e_spent, 1) + (1.0 - p) * cont(e_spent, k_up));
                idle.min(sampled)
            } else {
                idle
            };
            residual = residual.max((new - values[idx]).abs());
            values[idx] = new;
        }

        if residual < tol {
            break;
        }
        if iterations >= SWEEP_CAP {
            return Err(SolveError::NoConvergence(SWEEP_CAP));
        }
    }

    Ok(ValueFunction {
        space,
        discount,
        values,
        iterations,
        residual,
    })
}

/// True iff the converged table is nondecreasing in the age for every fixed
/// `(E, C)`, up to a small slack.
pub fn check_monotone_age(j: &ValueFunction) -> bool {
    let space = j.space;
    for e in 0..=space.buffer {
        for c in 0..space.channels {
            for k in 1..space.age_cap {
                let lo = j.value(FullState { energy: e, age: k, channel: c });
                let hi = j.value(FullState { energy: e, age: k + 1, channel: c });
                if hi < lo - 1e-9 {
                    return false;
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Greedy policy and threshold structure
// ---------------------------------------------------------------------------

/// Greedy stationary policy; `sample` is false wherever sampling is
/// infeasible.
#[derive(Clone, Debug)]
pub struct PolicyTable {
    pub space: StateSpace,
    pub sample: Vec<bool>,
}

impl PolicyTable {
    pub fn samples(&self, s: FullState) -> bool {
        self.sample[self.space.full_index(s)]
    }
}

/// Threshold view of a sampling region.
///
/// `age_threshold[(E, C)]` is the least age at which the policy samples
/// (`None` if it never does); `prob_threshold[(E, K)]` is the least success
/// probability at which it samples. Entries for `E < E_s` stay `None`. The
/// two flags report whether the region really is upward-closed in the age
/// and in the success probability.
#[derive(Clone, Debug)]
pub struct ThresholdTables {
    pub space: StateSpace,
    pub age_threshold: Vec<Option<u32>>,
    pub prob_threshold: Vec<Option<f64>>,
    pub threshold_in_age: bool,
    pub threshold_in_prob: bool,
}

impl ThresholdTables {
    pub fn age_at(&self, energy: u32, channel: usize) -> Option<u32> {
        self.age_threshold[energy as usize * self.space.channels + channel]
    }

    pub fn prob_at(&self, energy: u32, age: u32) -> Option<f64> {
        self.prob_threshold[energy as usize * self.space.age_cap as usize + (age as usize - 1)]
    }
}

/// Build threshold tables from an arbitrary sampling region.
pub(crate) fn thresholds_from_region(
    model: &SourceModel,
    region: impl Fn(FullState) -> bool,
) -> ThresholdTables {
    let space = model.space();
    let m = space.channels;
    let ages = space.age_cap as usize;
    let mut age_threshold = vec![None; (space.buffer as usize + 1) * m];
    let mut prob_threshold = vec![None; space.source_count()];
    let mut threshold_in_age = true;
    let mut threshold_in_prob = true;

    // Channels ordered by ascending success probability (stable on ties).
    let mut by_prob: Vec<usize> = (0..m).collect();
    by_prob.sort_by(|&a, &b| {
        model.channel.success_probs[a]
            .total_cmp(&model.channel.success_probs[b])
            .then(a.cmp(&b))
    });

    for e in model.sample_cost..=space.buffer {
        for c in 0..m {
            let mut first = None;
            let mut seen_gap = false;
            for k in 1..=space.age_cap {
                let inside = region(FullState { energy: e, age: k, channel: c });
                if inside {
                    if first.is_none() {
                        first = Some(k);
                    } else if seen_gap {
                        threshold_in_age = false;
                    }
                } else if first.is_some() {
                    seen_gap = true;
                    threshold_in_age = false;
                }
            }
            age_threshold[e as usize * m + c] = first;
        }
        for k in 1..=space.age_cap {
            let mut first = None;
            let mut seen_gap = false;
            for &c in &by_prob {
                let inside = region(FullState { energy: e, age: k, channel: c });
                if inside {
                    if first.is_none() {
                        first = Some(model.channel.success_probs[c]);
                    } else if seen_gap {
                        threshold_in_prob = false;
                    }
                } else if first.is_some() {
                    seen_gap = true;
                    threshold_in_prob = false;
                }
            }
            prob_threshold[e as usize * ages + (k as usize - 1)] = first;
        }
    }

    ThresholdTables {
        space,
        age_threshold,
        prob_threshold,
        threshold_in_age,
        threshold_in_prob,
    }
}

/// Extract the greedy policy of a converged value function together with its
/// threshold view. Sample/idle ties break toward sampling, which keeps the
/// recorded thresholds minimal.
pub fn extract_policy_and_thresholds(
    j: &ValueFunction,
    model: &SourceModel,
    lambda: f64,
    q: &[f64],
) -> Result<(PolicyTable, ThresholdTables), SolveError> {
    check_inputs(model, lambda, q, j.discount, 1.0)?;
    let space = model.space();
    if space != j.space {
        return Err(SolveError::Invalid("value function space mismatch".into()));
    }
    let ages = space.age_cap as usize;
    let m = space.channels;
    let mut avg = vec![0.0f64; space.source_count()];
    for ek in 0..space.source_count() {
        avg[ek] = (0..m).map(|jx| q[jx] * j.values[ek * m + jx]).sum();
    }
    let cont = |e: u32, k: u32| -> f64 {
        let up = (e + 1).min(model.buffer);
        lambda * avg[up as usize * ages + (k as usize - 1)]
            + (1.0 - lambda) * avg[e as usize * ages + (k as usize - 1)]
    };

    let mut sample = vec![false; space.full_count()];
    for s in space.full_states() {
        if s.energy < model.sample_cost {
            continue;
        }
        let k_up = (s.age + 1).min(model.age_cap);
        let idle = s.age as f64 + j.discount * cont(s.energy, k_up);
        let p = model.channel.success_probs[s.channel];
        let e_spent = s.energy - model.sample_cost;
        let sampled = s.age as f64 * (1.0 - p)
            + j.discount * (p * cont(e_spent, 1) + (1.0 - p) * cont(e_spent, k_up));
        sample[space.full_index(s)] = sampled <= idle;
    }

    let policy = PolicyTable {
        space,
        sample: sample.clone(),
    };
    let thresholds = thresholds_from_region(model, |s| sample[space.full_index(s)]);
    Ok((policy, thresholds))
}

// ---------------------------------------------------------------------------
// Decoupled per-source subproblem
// ---------------------------------------------------------------------------

/// Fixed point of the charged per-source system.
///
/// `values` is `J` over `(E, K)`; `idle_values`/`probe_values` are the
/// no-probe and probe branches; `intermediate` holds the post-probe values
/// `W(E, K, C)` laid out with the full-state index. The greedy policies use
/// the spec tie rules: probe-vs-idle breaks toward idle, sample-vs-idle
/// toward sampling.
#[derive(Clone, Debug)]
pub struct SubproblemSolution {
    pub space: StateSpace,
    pub discount: f64,
    pub charge: f64,
    pub values: Vec<f64>,
    pub idle_values: Vec<f64>,
    pub probe_values: Vec<f64>,
    pub intermediate: Vec<f64>,
    pub probe_policy: Vec<bool>,
    pub sample_policy: Vec<bool>,
    pub iterations: usize,
    pub residual: f64,
}

impl SubproblemSolution {
    pub fn idle_value(&self, s: SourceState) -> f64 {
        self.idle_values[self.space.source_index(s)]
    }

    pub fn probe_value(&self, s: SourceState) -> f64 {
        self.probe_values[self.space.source_index(s)]
    }

    /// Post-probe sampling region as a threshold table.
    pub fn sample_thresholds(&self, model: &SourceModel) -> ThresholdTables {
        thresholds_from_region(model, |s| self.sample_policy[self.space.full_index(s)])
    }
}

pub fn solve_source_subproblem(
    model: &SourceModel,
    lambda: f64,
    q: &[f64],
    charge: f64,
    discount: f64,
    tol: f64,
) -> Result<SubproblemSolution, SolveError> {
    solve_source_subproblem_warm(model, lambda, q, charge, discount, tol, None)
}

/// As [`solve_source_subproblem`], optionally starting from a previous
/// solution's value table (used heavily by the Whittle machinery).
pub fn solve_source_subproblem_warm(
    model: &SourceModel,
    lambda: f64,
    q: &[f64],
    charge: f64,
    discount: f64,
    tol: f64,
    warm: Option<&[f64]>,
) -> Result<SubproblemSolution, SolveError> {
    check_inputs(model, lambda, q, discount, tol)?;
    if charge < 0.0 {
        return Err(SolveError::Invalid("charge must be nonnegative".into()));
    }
    let space = model.space();
    let n = space.source_count();
    let ages = space.age_cap as usize;
    let mut values = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        Some(_) => return Err(SolveError::Invalid("warm start has wrong size".into())),
        None => vec![0.0f64; n],
    };

    let idx = |e: u32, k: u32| e as usize * ages + (k as usize - 1);
    let mut iterations = 0;
    let mut residual;
    loop {
        iterations += 1;
        residual = 0.0f64;
        // Gauss-Seidel sweep: updates feed later states within the sweep.
        for e in 0..=model.buffer {
            for k in 1..=model.age_cap {
                let k_up = (k + 1).min(model.age_cap);
                let e_up = (e + 1).min(model.buffer);
                let idle = k as f64
                    + discount
                        * (lambda * values[idx(e_up, k_up)]
                            + (1.0 - lambda) * values[idx(e, k_up)]);
                let new = if e >= model.sample_cost {
                    let e_spent = e - model.sample_cost;
                    let e_spent_up = (e_spent + 1).min(model.buffer);
                    let succ = lambda * values[idx(e_spent_up, 1)]
                        + (1.0 - lambda) * values[idx(e_spent, 1)];
                    let fail = lambda * values[idx(e_spent_up, k_up)]
                        + (1.0 - lambda) * values[idx(e_spent, k_up)];
                    let mut probe = charge;
                    for (c, &qc) in q.iter().enumerate() {
                        let p = model.channel.success_probs[c];
                        let sampled = k as f64 * (1.0 - p)
                            + discount * (p * succ + (1.0 - p) * fail);
                        probe += qc * idle.min(sampled);
                    }
                    idle.min(probe)
                } else {
                    idle
                };
                let at = idx(e, k);
                residual = residual.max((new - values[at]).abs());
                values[at] = new;
            }
        }
        if residual < tol {
            break;
        }
        if iterations >= SWEEP_CAP {
            return Err(SolveError::NoConvergence(SWEEP_CAP));
        }
    }

    // Consistent final tables from the converged values.
    let mut idle_values = vec![0.0f64; n];
    let mut probe_values = vec![0.0f64; n];
    let mut intermediate = vec![0.0f64; space.full_count()];
    let mut probe_policy = vec![false; n];
    let mut sample_policy = vec![false; space.full_count()];
    for e in 0..=model.buffer {
        for k in 1..=model.age_cap {
            let k_up = (k + 1).min(model.age_cap);
            let e_up = (e + 1).min(model.buffer);
            let idle = k as f64
                + discount
                    * (lambda * values[idx(e_up, k_up)] + (1.0 - lambda) * values[idx(e, k_up)]);
            let at = idx(e, k);
            idle_values[at] = idle;
            let mut probe = charge;
            for (c, &qc) in q.iter().enumerate() {
                let w = if e >= model.sample_cost {
                    let e_spent = e - model.sample_cost;
                    let e_spent_up = (e_spent + 1).min(model.buffer);
                    let succ = lambda * values[idx(e_spent_up, 1)]
                        + (1.0 - lambda) * values[idx(e_spent, 1)];
                    let fail = lambda * values[idx(e_spent_up, k_up)]
                        + (1.0 - lambda) * values[idx(e_spent, k_up)];
                    let p = model.channel.success_probs[c];
                    let sampled =
                        k as f64 * (1.0 - p) + discount * (p * succ + (1.0 - p) * fail);
                    let full = space.full_index(FullState { energy: e, age: k, channel: c });
                    sample_policy[full] = sampled <= idle;
                    idle.min(sampled)
                } else {
                    idle
                };
                intermediate[space.full_index(FullState { energy: e, age: k, channel: c })] = w;
                probe += qc * w;
            }
            probe_values[at] = probe;
            probe_policy[at] = probe < idle;
        }
    }

    Ok(SubproblemSolution {
        space,
        discount,
        charge,
        values,
        idle_values,
        probe_values,
        intermediate,
        probe_policy,
        sample_policy,
        iterations,
        residual,
    })
}

// ---------------------------------------------------------------------------
// Whittle indices
// ---------------------------------------------------------------------------

/// Per-state Whittle indices over `(E, K)`.
#[derive(Clone, Debug)]
pub struct WhittleTable {
    pub space: StateSpace,
    pub indices: Vec<f64>,
}

impl WhittleTable {
    pub fn index(&self, s: SourceState) -> f64 {
        self.indices[self.space.source_index(s)]
    }
}

/// Memoized subproblem solves along a charge axis. Bisections from many
/// states share the same dyadic midpoints, so the cache turns a per-state
/// search into a handful of distinct solves.
struct ChargeCache<'a> {
    model: &'a SourceModel,
    lambda: f64,
    q: &'a [f64],
    discount: f64,
    value_tol: f64,
    // (charge, converged values), sorted by charge.
    solves: Vec<(f64, Vec<f64>)>,
}

impl<'a> ChargeCache<'a> {
    fn new(model: &'a SourceModel, lambda: f64, q: &'a [f64], discount: f64, value_tol: f64) -> Self {
        ChargeCache {
            model,
            lambda,
            q,
            discount,
            value_tol,
            solves: Vec::new(),
        }
    }

    fn values_at(&mut self, charge: f64) -> Result<&[f64], SolveError> {
        let pos = self
            .solves
            .binary_search_by(|(c, _)| c.total_cmp(&charge));
        let pos = match pos {
            Ok(i) => return Ok(&self.solves[i].1),
            Err(i) => i,
        };
        // Warm-start from the nearest solved charge.
        let warm = if self.solves.is_empty() {
            None
        } else if pos == 0 {
            Some(self.solves[0].1.as_slice())
        } else if pos == self.solves.len() {
            Some(self.solves[pos - 1].1.as_slice())
        } else {
            let below = &self.solves[pos - 1];
            let above = &self.solves[pos];
            if charge - below.0 <= above.0 - charge {
                Some(below.1.as_slice())
            } else {
                Some(above.1.as_slice())
            }
        };
        let warm = warm.map(|w| w.to_vec());
        let sol = solve_source_subproblem_warm(
            self.model,
            self.lambda,
            self.q,
            charge,
            self.discount,
            self.value_tol,
            warm.as_deref(),
        )?;
        self.solves.insert(pos, (charge, sol.values));
        Ok(&self.solves[pos].1)
    }

    /// `u_hat <= v_hat` (idle weakly preferred) at the given state/charge.
    fn passive_at(&mut self, charge: f64, state: SourceState) -> Result<bool, SolveError> {
        let model = self.model;
        let (lambda, discount) = (self.lambda, self.discount);
        let q = self.q;
        let space = model.space();
        let ages = space.age_cap as usize;
        let values = self.values_at(charge)?;
        let idx = |e: u32, k: u32| e as usize * ages + (k as usize - 1);
        let (e, k) = (state.energy, state.age);
        let k_up = (k + 1).min(model.age_cap);
        let e_up = (e + 1).min(model.buffer);
        let idle = k as f64
            + discount
                * (lambda * values[idx(e_up, k_up)] + (1.0 - lambda) * values[idx(e, k_up)]);
        let mut probe = charge;
        if e >= model.sample_cost {
            let e_spent = e - model.sample_cost;
            let e_spent_up = (e_spent + 1).min(model.buffer);
            let succ =
                lambda * values[idx(e_spent_up, 1)] + (1.0 - lambda) * values[idx(e_spent, 1)];
            let fail = lambda * values[idx(e_spent_up, k_up)]
                + (1.0 - lambda) * values[idx(e_spent, k_up)];
            for (c, &qc) in q.iter().enumerate() {
                let p = model.channel.success_probs[c];
                let sampled = k as f64 * (1.0 - p) + discount * (p * succ + (1.0 - p) * fail);
                probe += qc * idle.min(sampled);
            }
        } else {
            probe += idle;
        }
        Ok(idle <= probe + INDIFFERENCE_EPS)
    }

    fn bisect(&mut self, state: SourceState, tol: f64) -> Result<f64, SolveError> {
        if self.passive_at(0.0, state)? {
            return Ok(0.0);
        }
        let mut lo = 0.0f64;
        let mut hi = self.model.age_cap as f64 / (1.0 - self.discount);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.passive_at(mid, state)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

fn whittle_value_tol(tol: f64) -> f64 {
    // The probe/idle comparison must resolve differences at the bisection
    // scale; converge the inner solves well past it.
    (tol * 1e-3).min(1e-7)
}

/// Smallest charge at which not probing is weakly preferred in `state`,
/// located by bisection over `[0, K_max / (1 - discount)]`.
pub fn whittle_index(
    model: &SourceModel,
    lambda: f64,
    q: &[f64],
    state: SourceState,
    discount: f64,
    tol: f64,
) -> Result<f64, SolveError> {
    if tol <= 0.0 {
        return Err(SolveError::Invalid("tolerance must be positive".into()));
    }
    let mut cache = ChargeCache::new(model, lambda, q, discount, whittle_value_tol(tol));
    cache.bisect(state, tol)
}

/// Whittle indices for every `(E, K)` plus the zero-charge subproblem
/// solution (whose sampling region supplies the `p_th` table).
pub fn whittle_table(
    model: &SourceModel,
    lambda: f64,
    q: &[f64],
    discount: f64,
    tol: f64,
) -> Result<(WhittleTable, SubproblemSolution), SolveError> {
    if tol <= 0.0 {
        return Err(SolveError::Invalid("tolerance must be positive".into()));
    }
    let space = model.space();
    let mut cache = ChargeCache::new(model, lambda, q, discount, whittle_value_tol(tol));
    let mut indices = vec![0.0f64; space.source_count()];
    for s in space.source_states() {
        if s.energy < model.sample_cost {
            continue; // probing gains nothing without energy to sample
        }
        indices[space.source_index(s)] = cache.bisect(s, tol)?;
    }
    let zero = solve_source_subproblem_warm(
        model,
        lambda,
        q,
        0.0,
        discount,
        whittle_value_tol(tol),
        cache.solves.first().map(|(_, v)| v.as_slice()),
    )?;
    Ok((WhittleTable { space, indices }, zero))
}

/// Check that the passive sets grow by inclusion along an increasing charge
/// grid starting at zero.
pub fn indexability_check(
    model: &SourceModel,
    lambda: f64,
    q: &[f64],
    charge_grid: &[f64],
    discount: f64,
) -> Result<bool, SolveError> {
    if charge_grid.is_empty() || charge_grid[0] != 0.0 {
        return Err(SolveError::Invalid("grid must start at 0".into()));
    }
    if charge_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SolveError::Invalid("grid must be strictly increasing".into()));
    }
    let space = model.space();
    let mut warm: Option<Vec<f64>> = None;
    let mut previous: Option<Vec<bool>> = None;
    for &charge in charge_grid {
        let sol = solve_source_subproblem_warm(
            model,
            lambda,
            q,
            charge,
            discount,
            1e-9,
            warm.as_deref(),
        )?;
        let passive: Vec<bool> = (0..space.source_count())
            .map(|i| sol.idle_values[i] < sol.probe_values[i] - INDIFFERENCE_EPS)
            .collect();
        if let Some(prev) = &previous {
            for i in 0..passive.len() {
                // Once strictly passive, a state may not leave the set.
                if prev[i] && sol.idle_values[i] >= sol.probe_values[i] {
                    return Ok(false);
                }
            }
        }
        previous = Some(passive);
        warm = Some(sol.values);
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Stationary multi-source decision rule
// ---------------------------------------------------------------------------

/// Outcome of the index-based probe/sample rule for one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wits3Decision {
    pub probe: Option<usize>,
    pub sample: bool,
}

/// Probe the energized source with the highest Whittle index (ties: larger
/// age, then smaller id) and sample it iff the observed success probability
/// clears its `p_th` threshold.
pub fn wits3_decision(
    models: &[&SourceModel],
    states: &[SourceState],
    whittle: &[&WhittleTable],
    thresholds: &[&ThresholdTables],
    channels: &[usize],
) -> Wits3Decision {
    let mut best: Option<(usize, f64)> = None;
    for (i, state) in states.iter().enumerate() {
        if state.energy < models[i].sample_cost {
            continue;
        }
        let index = whittle[i].index(*state);
        let better = match best {
            None => true,
            Some((bi, bv)) => {
                index > bv
                    || (index == bv
                        && (state.age > states[bi].age
                            || (state.age == states[bi].age && i < bi)))
            }
        };
        if better {
            best = Some((i, index));
        }
    }
    let Some((probed, _)) = best else {
        return Wits3Decision { probe: None, sample: false };
    };
    let state = states[probed];
    let p = models[probed].channel.success_probs[channels[probed]];
    let sample = match thresholds[probed].prob_at(state.energy, state.age) {
        Some(p_th) => p >= p_th - 1e-12,
        None => false,
    };
    Wits3Decision {
        probe: Some(probed),
        sample,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ChannelModel;

    fn model(buffer: u32, sample_cost: u32, age_cap: u32, probs: Vec<f64>) -> SourceModel {
        SourceModel::new(buffer, sample_cost, age_cap, ChannelModel::new(probs).unwrap()).unwrap()
    }

    #[test]
    fn zero_discount_collapses_to_single_stage_cost() {
        let m = model(3, 2, 4, vec![0.9, 0.3]);
        let j = value_iteration(&m, 0.5, &[0.6, 0.4], 0.0, 1e-12).unwrap();
        for s in m.space().full_states() {
            let p = m.channel.success_probs[s.channel];
            let want = if s.energy >= m.sample_cost {
                s.age as f64 * (1.0 - p)
            } else {
                s.age as f64
            };
            assert!((j.value(s) - want).abs() < 1e-12, "{s:?}");
        }
        assert!(check_monotone_age(&j));
    }

    #[test]
    fn monotone_age_on_random_small_models() {
        for seed in 0..10u64 {
            let x = |k: u64| {
                // cheap deterministic pseudo-randoms in (0,1)
                let mut v = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(k);
                v ^= v >> 33;
                v = v.wrapping_mul(0xff51afd7ed558ccd);
                v ^= v >> 33;
                (v >> 11) as f64 / (1u64 << 53) as f64
            };
            let m = model(3, 1, 5, vec![x(1), x(2)]);
            let q2 = 0.2 + 0.6 * x(3);
            let lambda = x(4);
            let j = value_iteration(&m, lambda, &[1.0 - q2, q2], 0.9, 1e-10).unwrap();
            assert!(check_monotone_age(&j), "seed {seed}");
        }
    }

    #[test]
    fn free_success_and_energy_always_samples() {
        let m = model(2, 1, 5, vec![1.0]);
        let j = value_iteration(&m, 1.0, &[1.0], 0.9, 1e-10).unwrap();
        let (policy, thresholds) = extract_policy_and_thresholds(&j, &m, 1.0, &[1.0]).unwrap();
        for s in m.space().full_states() {
            if s.energy >= 1 {
                assert!(policy.samples(s), "{s:?}");
            }
        }
        for e in 1..=2 {
            assert_eq!(thresholds.age_at(e, 0), Some(1));
        }
        assert!(thresholds.threshold_in_age);
        assert!(thresholds.threshold_in_prob);
    }

    #[test]
    fn dominated_charge_never_probes() {
        let m = model(3, 1, 4, vec![0.9, 0.5]);
        let cap = m.age_cap as f64 / (1.0 - 0.9);
        let sol = solve_source_subproblem(&m, 0.5, &[0.5, 0.5], cap, 0.9, 1e-10).unwrap();
        assert!(sol.probe_policy.iter().all(|&b| !b));
    }

    #[test]
    fn zero_charge_without_energy_is_indifferent() {
        let m = model(3, 2, 4, vec![0.9, 0.5]);
        let sol = solve_source_subproblem(&m, 0.5, &[0.5, 0.5], 0.0, 0.9, 1e-10).unwrap();
        for s in m.space().source_states() {
            if s.energy < m.sample_cost {
                assert!((sol.idle_value(s) - sol.probe_value(s)).abs() < 1e-9, "{s:?}");
            }
        }
    }

    #[test]
    fn whittle_index_zero_below_sample_cost() {
        let m = model(3, 2, 4, vec![0.9, 0.5]);
        let idx = whittle_index(
            &m,
            0.5,
            &[0.5, 0.5],
            SourceState { energy: 1, age: 3 },
            0.9,
            1e-3,
        )
        .unwrap();
        assert_eq!(idx, 0.0);
    }

    #[test]
    fn whittle_table_matches_single_calls() {
        let m = model(2, 1, 4, vec![0.8, 0.3]);
        let (table, _) = whittle_table(&m, 0.4, &[0.6, 0.4], 0.9, 1e-3).unwrap();
        for s in [
            SourceState { energy: 1, age: 2 },
            SourceState { energy: 2, age: 4 },
            SourceState { energy: 0, age: 3 },
        ] {
            let one = whittle_index(&m, 0.4, &[0.6, 0.4], s, 0.9, 1e-3).unwrap();
            assert!(
                (one - table.index(s)).abs() <= 2e-3,
                "{s:?}: {one} vs {}",
                table.index(s)
            );
        }
    }

    #[test]
    fn indexability_trivial_grids() {
        let m = model(2, 1, 4, vec![0.8, 0.3]);
        assert!(indexability_check(&m, 0.4, &[0.6, 0.4], &[0.0], 0.9).unwrap());
        let cap = m.age_cap as f64 / (1.0 - 0.9);
        let sol = solve_source_subproblem(&m, 0.4, &[0.6, 0.4], cap, 0.9, 1e-10).unwrap();
        let passive = (0..m.space().source_count())
            .filter(|&i| sol.idle_values[i] < sol.probe_values[i] - 1e-9)
            .count();
        // At a dominated charge the passive set is the whole space.
        assert_eq!(passive, m.space().source_count());
    }

    #[test]
    fn wits3_prefers_older_of_identical_sources() {
        let m = model(7, 1, 10, vec![0.8, 0.2]);
        let (table, zero) = whittle_table(&m, 0.5, &[0.5, 0.5], 0.9, 1e-3).unwrap();
        let th = zero.sample_thresholds(&m);
        let states = [
            SourceState { energy: 5, age: 3 },
            SourceState { energy: 5, age: 7 },
        ];
        let d = wits3_decision(
            &[&m, &m],
            &states,
            &[&table, &table],
            &[&th, &th],
            &[0, 0],
        );
        assert_eq!(d.probe, Some(1));
    }

    #[test]
    fn wits3_idles_when_all_starved() {
        let m = model(3, 2, 4, vec![0.9, 0.5]);
        let (table, zero) = whittle_table(&m, 0.5, &[0.5, 0.5], 0.9, 1e-3).unwrap();
        let th = zero.sample_thresholds(&m);
        let states = [SourceState { energy: 1, age: 3 }, SourceState { energy: 0, age: 9 }];
        let d = wits3_decision(&[&m, &m], &states, &[&table, &table], &[&th, &th], &[0, 1]);
        assert_eq!(d.probe, None);
        assert!(!d.sample);
    }

    #[test]
    fn wits3_single_source_reduces_to_probability_threshold() {
        let m = model(7, 1, 10, vec![0.8, 0.2]);
        let (table, zero) = whittle_table(&m, 0.3, &[0.5, 0.5], 0.9, 1e-3).unwrap();
        let th = zero.sample_thresholds(&m);
        let state = SourceState { energy: 4, age: 5 };
        for c in 0..2 {
            let d = wits3_decision(&[&m], &[state], &[&table], &[&th], &[c]);
            assert_eq!(d.probe, Some(0));
            let p = m.channel.success_probs[c];
            let want = th
                .prob_at(state.energy, state.age)
                .map(|pth| p >= pth - 1e-12)
                .unwrap_or(false);
            assert_eq!(d.sample, want);
        }
    }
}
