//! Run traces shared by all policies.

use crate::env::Slot;
use serde::Serialize;

/// One (slot, source) row of a run trace.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SlotRecord {
    pub t: Slot,
    pub episode: u64,
    pub source: usize,
    #[serde(rename = "E")]
    pub energy: u32,
    #[serde(rename = "K")]
    pub age: u32,
    /// 1-based channel-state index of this source at slot `t`.
    #[serde(rename = "C")]
    pub channel: usize,
    #[serde(rename = "b")]
    pub probe: u8,
    #[serde(rename = "a")]
    pub sample: u8,
    #[serde(rename = "r")]
    pub success: u8,
    pub cost: f64,
    pub cum_cost: f64,
    /// Running mean of the per-source cumulative costs.
    pub cum_cost_avg: f64,
}

/// One master-level block decision of a bandit-over-learning run.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BlockRecord {
    #[serde(rename = "theta")]
    pub block: u64,
    #[serde(rename = "l_theta")]
    pub arm: usize,
    #[serde(rename = "W_theta")]
    pub window: u64,
    pub block_cost: f64,
}

/// Everything one `(algorithm, seed)` run produced.
#[derive(Clone, Debug)]
pub struct RunTrace {
    pub algorithm: String,
    pub seed: u64,
    pub sources: usize,
    pub records: Vec<SlotRecord>,
    pub blocks: Vec<BlockRecord>,
    /// Source-averaged cumulative cost after each slot (length = horizon).
    pub cum_curve: Vec<f64>,
}

impl RunTrace {
    pub fn final_cum_cost(&self) -> f64 {
        self.cum_curve.last().copied().unwrap_or(0.0)
    }
}
