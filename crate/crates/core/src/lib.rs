//! Scheduling and sampling for energy-harvesting status-update sources.
//!
//! The crate splits into:
//!
//! - [`env`]: the ground-truth system model (fading channel, Bernoulli energy
//!   arrivals, drifting parameter schedules), its exact transition kernels,
//!   and a seeded simulator with purpose-split random streams.
//! - [`solver`]: exact discounted-cost solvers for the stationary problem,
//!   threshold extraction, Whittle indices, and indexability checks.
//! - [`learner`]: sliding-window confidence-set learning for one source under
//!   parameter drift (window estimates, extended value iteration, and the
//!   age/energy/channel threshold rule).
//! - [`borl`]: an EXP3.P master that tunes the sliding-window size per block
//!   when the drift budgets are unknown.
//! - [`multi`]: the multi-source schedulers that combine per-source Whittle
//!   indices with the sliding-window machinery under a one-probe-per-slot
//!   constraint.
//! - [`baselines`]: reference policies for the comparison plots.
//! - [`harness`]: experiment configuration, seeded sweeps, aggregation, and
//!   CSV emission.

pub mod env;
pub mod solver;
pub mod trace;
pub mod learner;
pub mod borl;
pub mod multi;
pub mod baselines;
pub mod blind;
pub mod harness;
