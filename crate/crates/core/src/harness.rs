//! Experiment configuration, seeded sweeps, aggregation, and file emission.
//!
//! A single TOML document describes one scenario: the sources, their
//! parameter schedules, the horizon, seeds, and the algorithm list. Runs are
//! independent across `(algorithm, seed)` pairs and execute in parallel;
//! outputs are written in a fixed order so identical configs produce
//! byte-identical files.

use crate::baselines::BaselineKind;
use crate::borl::{DeltaWMode, FeedbackMode};
use crate::env::{
    variation_budgets, variation_budgets_source, ChannelModel, CostMode, EnvError, ParamSchedule,
    SourceModel,
};
use crate::learner::{window_from_budgets, RunError, SwUcrl2Config};
use crate::multi::{MultiConfig, ProbeRule, SampleRule};
use crate::solver::{
    check_monotone_age, extract_policy_and_thresholds, value_iteration, SolveError,
    ThresholdTables,
};
use crate::trace::RunTrace;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    StationarySingle,
    NonstatSingle,
    NonstatMulti,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceConfig {
    pub buffer: u32,
    pub sample_cost: u32,
    pub age_cap: u32,
    pub success_probs: Vec<f64>,
    pub schedule: ParamSchedule,
}

impl SourceConfig {
    pub fn model(&self) -> Result<SourceModel, EnvError> {
        SourceModel::new(
            self.buffer,
            self.sample_cost,
            self.age_cap,
            ChannelModel::new(self.success_probs.clone())?,
        )
    }
}

/// Fixed window size or the budget-driven choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowMode {
    Fixed(u64),
    Named(AutoWindow),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoWindow {
    Auto,
}

impl Default for WindowMode {
    fn default() -> Self {
        WindowMode::Named(AutoWindow::Auto)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BorlOptions {
    pub delta_w_mode: DeltaWMode,
    pub feedback: FeedbackMode,
}

impl Default for BorlOptions {
    fn default() -> Self {
        BorlOptions {
            delta_w_mode: DeltaWMode::Log,
            feedback: FeedbackMode::Reward,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}

fn default_delta() -> f64 {
    0.05
}

fn default_discount() -> f64 {
    0.99
}

fn default_whittle_tol() -> f64 {
    1e-3
}

fn default_cost_mode() -> CostMode {
    CostMode::Expected
}

fn default_radius_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub horizon: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub algorithms: Vec<String>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_whittle_tol")]
    pub whittle_tol: f64,
    /// Multiplier on the learners' confidence radii.
    #[serde(default = "default_radius_scale")]
    pub radius_scale: f64,
    #[serde(default)]
    pub window: WindowMode,
    #[serde(default = "default_cost_mode")]
    pub cost_mode: CostMode,
    /// Arrival rates swept by the stationary scenario.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub borl: BorlOptions,
    pub sources: Vec<SourceConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.horizon < 1 {
            return Err(HarnessError::Config("horizon must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("need at least one seed".into()));
        }
        if self.sources.is_empty() {
            return Err(HarnessError::Config("need at least one source".into()));
        }
        let single = matches!(
            self.scenario,
            Scenario::StationarySingle | Scenario::NonstatSingle
        );
        if single && self.sources.len() != 1 {
            return Err(HarnessError::Config(
                "single-source scenarios take exactly one source".into(),
            ));
        }
        for (i, src) in self.sources.iter().enumerate() {
            let model = src.model()?;
            src.schedule
                .validate(model.channel.state_count())
                .map_err(|e| HarnessError::Config(format!("source {i}: {e}")))?;
        }
        for name in &self.algorithms {
            let algorithm = Algorithm::parse(name)
                .ok_or_else(|| HarnessError::Config(format!("unknown algorithm '{name}'")))?;
            if algorithm.multi_source() != matches!(self.scenario, Scenario::NonstatMulti) {
                return Err(HarnessError::Config(format!(
                    "algorithm '{name}' does not fit scenario"
                )));
            }
        }
        Ok(())
    }

    pub fn models(&self) -> Result<Vec<SourceModel>, HarnessError> {
        Ok(self
            .sources
            .iter()
            .map(|s| s.model())
            .collect::<Result<_, _>>()?)
    }

    pub fn schedules(&self) -> Vec<ParamSchedule> {
        self.sources.iter().map(|s| s.schedule.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Algorithms
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    AecSwUcrl2,
    AecBorl,
    SwUcrl2,
    Borl,
    WitSwUcrl2,
    WitBorl,
    MaSwUcrl2,
    Random,
}

impl Algorithm {
    pub fn parse(name: &str) -> Option<Algorithm> {
        match name.to_ascii_lowercase().as_str() {
            "aec-sw-ucrl2" => Some(Algorithm::AecSwUcrl2),
            "aec-borl" => Some(Algorithm::AecBorl),
            "sw-ucrl2" | "swucrl2" => Some(Algorithm::SwUcrl2),
            "borl" => Some(Algorithm::Borl),
            "wit-sw-ucrl2" => Some(Algorithm::WitSwUcrl2),
            "wit-borl" => Some(Algorithm::WitBorl),
            "ma-sw-ucrl2" => Some(Algorithm::MaSwUcrl2),
            "random" => Some(Algorithm::Random),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::AecSwUcrl2 => "aec-sw-ucrl2",
            Algorithm::AecBorl => "aec-borl",
            Algorithm::SwUcrl2 => "sw-ucrl2",
            Algorithm::Borl => "borl",
            Algorithm::WitSwUcrl2 => "wit-sw-ucrl2",
            Algorithm::WitBorl => "wit-borl",
            Algorithm::MaSwUcrl2 => "ma-sw-ucrl2",
            Algorithm::Random => "random",
        }
    }

    pub fn multi_source(&self) -> bool {
        matches!(
            self,
            Algorithm::WitSwUcrl2 | Algorithm::WitBorl | Algorithm::MaSwUcrl2 | Algorithm::Random
        )
    }

    fn needs_window(&self) -> bool {
        matches!(
            self,
            Algorithm::AecSwUcrl2 | Algorithm::SwUcrl2 | Algorithm::WitSwUcrl2 | Algorithm::MaSwUcrl2
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Resolve the fixed window for the scenario: either as configured, or from
/// the variation budgets (`W = T` when the schedule is stationary).
pub fn resolve_window(config: &ExperimentConfig) -> Result<u64, HarnessError> {
    match config.window {
        WindowMode::Fixed(w) => {
            if w < 1 || w > config.horizon {
                return Err(HarnessError::Config("window outside [1, T]".into()));
            }
            Ok(w)
        }
        WindowMode::Named(AutoWindow::Auto) => {
            let models = config.models()?;
            let mut best = 1u64;
            let mut any_drift = false;
            for (model, src) in models.iter().zip(config.sources.iter()) {
                let (state_count, action_count, budgets) = if config.scenario
                    == Scenario::NonstatMulti
                {
                    let b = variation_budgets_source(model, &src.schedule, config.horizon)?;
                    (model.space().source_count(), 3, b)
                } else {
                    let b = variation_budgets(model, &src.schedule, config.horizon)?;
                    (model.space().full_count(), 2, b)
                };
                if b_is_zero(&budgets.v_lambda, &budgets.v_q) {
                    continue;
                }
                any_drift = true;
                let w = window_from_budgets(
                    state_count,
                    action_count,
                    config.horizon,
                    budgets.v_lambda,
                    budgets.v_q,
                )
                .map_err(RunError::from)?;
                best = best.max(w);
            }
            if !any_drift {
                // Stationary schedules: the whole horizon is one window.
                return Ok(config.horizon);
            }
            Ok(best)
        }
    }
}

fn b_is_zero(v_lambda: &f64, v_q: &f64) -> bool {
    v_lambda + v_q <= 0.0
}

/// Run one `(algorithm, seed)` pair of the configured scenario.
pub fn run_one(
    config: &ExperimentConfig,
    algorithm: Algorithm,
    seed: u64,
    window: u64,
) -> Result<RunTrace, HarnessError> {
    let models = config.models()?;
    let schedules = config.schedules();
    let trace = match algorithm {
        Algorithm::AecSwUcrl2 => {
            let cfg = SwUcrl2Config {
                window,
                delta: config.delta,
                use_threshold: true,
                radius_scale: config.radius_scale,
                evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
            };
            crate::learner::run_sw_ucrl2(
                &models[0],
                &schedules[0],
                config.cost_mode,
                seed,
                config.horizon,
                &cfg,
                algorithm.name(),
            )?
        }
        Algorithm::AecBorl => crate::borl::run_borl_single(
            &models[0],
            &schedules[0],
            config.cost_mode,
            seed,
            config.horizon,
            config.delta,
            true,
            config.radius_scale,
            config.borl.delta_w_mode,
            config.borl.feedback,
            algorithm.name(),
        )?,
        Algorithm::SwUcrl2 => crate::baselines::run_baseline(
            BaselineKind::SwUcrl2,
            &models,
            &schedules,
            config.cost_mode,
            seed,
            config.horizon,
            Some(window),
            config.delta,
            config.radius_scale,
            algorithm.name(),
        )?,
        Algorithm::Borl => crate::baselines::run_baseline(
            BaselineKind::Borl,
            &models,
            &schedules,
            config.cost_mode,
            seed,
            config.horizon,
            None,
            config.delta,
            config.radius_scale,
            algorithm.name(),
        )?,
        Algorithm::WitSwUcrl2 => {
            let cfg = MultiConfig {
                window,
                delta: config.delta,
                discount: config.discount,
                whittle_tol: config.whittle_tol,
                probe_rule: ProbeRule::WhittleIndex,
                sample_rule: SampleRule::ThresholdThenPolicy,
                radius_scale: config.radius_scale,
                evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
            };
            crate::multi::run_multi(
                &models,
                &schedules,
                config.cost_mode,
                seed,
                config.horizon,
                &cfg,
                algorithm.name(),
            )?
        }
        Algorithm::WitBorl => {
            let cfg = MultiConfig {
                window: 1, // overridden per block by the master
                delta: config.delta,
                discount: config.discount,
                whittle_tol: config.whittle_tol,
                probe_rule: ProbeRule::WhittleIndex,
                sample_rule: SampleRule::ThresholdThenPolicy,
                radius_scale: config.radius_scale,
                evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
            };
            crate::multi::run_borl_multi(
                &models,
                &schedules,
                config.cost_mode,
                seed,
                config.horizon,
                &cfg,
                config.borl.delta_w_mode,
                config.borl.feedback,
                algorithm.name(),
            )?
        }
        Algorithm::MaSwUcrl2 => crate::baselines::run_baseline(
            BaselineKind::MaSwUcrl2,
            &models,
            &schedules,
            config.cost_mode,
            seed,
            config.horizon,
            Some(window),
            config.delta,
            config.radius_scale,
            algorithm.name(),
        )?,
        Algorithm::Random => crate::baselines::run_baseline(
            BaselineKind::Random,
            &models,
            &schedules,
            config.cost_mode,
            seed,
            config.horizon,
            None,
            config.delta,
            config.radius_scale,
            algorithm.name(),
        )?,
    };
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Per-slot mean and standard error of the cumulative cost across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateCurve {
    pub algorithm: String,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AggregateResult {
    pub curves: Vec<AggregateCurve>,
}

impl AggregateResult {
    pub fn curve(&self, algorithm: &str) -> Option<&AggregateCurve> {
        self.curves.iter().find(|c| c.algorithm == algorithm)
    }

    pub fn final_mean(&self, algorithm: &str) -> Option<f64> {
        self.curve(algorithm).and_then(|c| c.mean.last().copied())
    }
}

/// Mean/standard-error reduction over the per-seed cumulative curves,
/// preserving the given algorithm order.
pub fn aggregate(traces: &[RunTrace], algorithms: &[Algorithm]) -> AggregateResult {
    let mut curves = Vec::new();
    for algorithm in algorithms {
        let group: Vec<&RunTrace> = traces
            .iter()
            .filter(|t| t.algorithm == algorithm.name())
            .collect();
        if group.is_empty() {
            continue;
        }
        let horizon = group[0].cum_curve.len();
        let n = group.len() as f64;
        let mut mean = vec![0.0f64; horizon];
        let mut stderr = vec![0.0f64; horizon];
        for trace in &group {
            for (i, v) in trace.cum_curve.iter().enumerate() {
                mean[i] += v;
            }
        }
        for v in mean.iter_mut() {
            *v /= n;
        }
        if group.len() > 1 {
            for trace in &group {
                for (i, v) in trace.cum_curve.iter().enumerate() {
                    let d = v - mean[i];
                    stderr[i] += d * d;
                }
            }
            for v in stderr.iter_mut() {
                *v = (*v / (n - 1.0)).sqrt() / n.sqrt();
            }
        }
        curves.push(AggregateCurve {
            algorithm: algorithm.name().to_string(),
            mean,
            stderr,
        });
    }
    AggregateResult { curves }
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

pub struct ExperimentOutput {
    pub aggregate: AggregateResult,
    pub traces: Vec<RunTrace>,
    pub window: u64,
}

/// Run every `(algorithm, seed)` pair of the config in parallel and, when an
/// output directory is given, write per-run traces plus the aggregate CSV.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    if config.scenario == Scenario::StationarySingle {
        return Err(HarnessError::Config(
            "stationary scenario is served by solve_stationary".into(),
        ));
    }
    let algorithms: Vec<Algorithm> = config
        .algorithms
        .iter()
        .map(|n| Algorithm::parse(n).expect("validated"))
        .collect();
    if algorithms.is_empty() {
        return Err(HarnessError::Config("no algorithms configured".into()));
    }
    let window = if algorithms.iter().any(|a| a.needs_window()) {
        resolve_window(config)?
    } else {
        config.horizon
    };

    let mut jobs: Vec<(usize, Algorithm, u64)> = Vec::new();
    for (ai, algorithm) in algorithms.iter().enumerate() {
        for &seed in &config.seeds {
            jobs.push((ai, *algorithm, seed));
        }
    }
    let mut results: Vec<(usize, u64, RunTrace)> = jobs
        .par_iter()
        .map(|&(ai, algorithm, seed)| {
            run_one(config, algorithm, seed, window).map(|t| (ai, seed, t))
        })
        .collect::<Result<_, _>>()?;
    results.sort_by_key(|&(ai, seed, _)| (ai, seed));
    let traces: Vec<RunTrace> = results.into_iter().map(|(_, _, t)| t).collect();

    let aggregate = aggregate(&traces, &algorithms);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        for trace in &traces {
            write_trace_csv(dir, trace)?;
            if !trace.blocks.is_empty() {
                write_blocks_csv(dir, trace)?;
            }
        }
        write_aggregate_csv(&dir.join("aggregate.csv"), &aggregate)?;
    }
    Ok(ExperimentOutput {
        aggregate,
        traces,
        window,
    })
}

// ---------------------------------------------------------------------------
// Stationary tables
// ---------------------------------------------------------------------------

/// Solved threshold tables for one arrival rate.
pub struct StationarySolution {
    pub lambda: f64,
    pub monotone_in_age: bool,
    pub thresholds: ThresholdTables,
}

/// Solve the stationary single-source problem across the configured arrival
/// rates and emit the threshold tables.
pub fn solve_stationary(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<StationarySolution>, HarnessError> {
    config.validate()?;
    let model = config.sources[0].model()?;
    let (base_lambda, q) = config.sources[0].schedule.at(1)?;
    let lambdas = if config.lambda_grid.is_empty() {
        vec![base_lambda]
    } else {
        config.lambda_grid.clone()
    };
    let mut out = Vec::new();
    for &lambda in &lambdas {
        let j = value_iteration(&model, lambda, &q, config.discount, 1e-6)?;
        let (_, thresholds) = extract_policy_and_thresholds(&j, &model, lambda, &q)?;
        out.push(StationarySolution {
            lambda,
            monotone_in_age: check_monotone_age(&j),
            thresholds,
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_threshold_tables(dir, &model, &out)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

fn write_trace_csv(dir: &Path, trace: &RunTrace) -> Result<(), HarnessError> {
    let path = dir.join(format!("trace_{}_seed{}.csv", trace.algorithm, trace.seed));
    let mut f = fs::File::create(path)?;
    writeln!(
        f,
        "algorithm,t,episode,source,E,K,C,b,a,r,cost,cum_cost,cum_cost_avg"
    )?;
    for r in &trace.records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            trace.algorithm,
            r.t,
            r.episode,
            r.source,
            r.energy,
            r.age,
            r.channel,
            r.probe,
            r.sample,
            r.success,
            r.cost,
            r.cum_cost,
            r.cum_cost_avg
        )?;
    }
    Ok(())
}

fn write_blocks_csv(dir: &Path, trace: &RunTrace) -> Result<(), HarnessError> {
    let path = dir.join(format!("blocks_{}_seed{}.csv", trace.algorithm, trace.seed));
    let mut f = fs::File::create(path)?;
    writeln!(f, "theta,l_theta,W_theta,block_cost")?;
    for b in &trace.blocks {
        writeln!(f, "{},{},{},{}", b.block, b.arm, b.window, b.block_cost)?;
    }
    Ok(())
}

pub fn write_aggregate_csv(path: &Path, aggregate: &AggregateResult) -> Result<(), HarnessError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "t,algorithm,mean_cum_cost,stderr")?;
    for curve in &aggregate.curves {
        for (i, (m, s)) in curve.mean.iter().zip(curve.stderr.iter()).enumerate() {
            writeln!(f, "{},{},{},{}", i + 1, curve.algorithm, m, s)?;
        }
    }
    Ok(())
}

pub fn read_aggregate_csv(path: &Path) -> Result<AggregateResult, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut curves: Vec<AggregateCurve> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let algorithm = row[1].to_string();
        let mean: f64 = row[2].parse().map_err(|_| {
            HarnessError::Config(format!("bad mean value '{}'", &row[2]))
        })?;
        let stderr: f64 = row[3].parse().map_err(|_| {
            HarnessError::Config(format!("bad stderr value '{}'", &row[3]))
        })?;
        let at = *index.entry(algorithm.clone()).or_insert_with(|| {
            curves.push(AggregateCurve {
                algorithm,
                mean: Vec::new(),
                stderr: Vec::new(),
            });
            curves.len() - 1
        });
        curves[at].mean.push(mean);
        curves[at].stderr.push(stderr);
    }
    Ok(AggregateResult { curves })
}

fn write_threshold_tables(
    dir: &Path,
    model: &SourceModel,
    solutions: &[StationarySolution],
) -> Result<(), HarnessError> {
    // Age thresholds: one row per (E, C); empty threshold = never samples.
    let mut f = fs::File::create(dir.join("threshold_age.csv"))?;
    writeln!(f, "E,C,K_th,lambda")?;
    for sol in solutions {
        for e in model.sample_cost..=model.buffer {
            for c in 0..model.channel.state_count() {
                match sol.thresholds.age_at(e, c) {
                    Some(k) => writeln!(f, "{},{},{},{}", e, c + 1, k, sol.lambda)?,
                    None => writeln!(f, "{},{},,{}", e, c + 1, sol.lambda)?,
                }
            }
        }
    }
    let mut f = fs::File::create(dir.join("threshold_prob.csv"))?;
    writeln!(f, "E,K,p_th,lambda")?;
    for sol in solutions {
        for e in model.sample_cost..=model.buffer {
            for k in 1..=model.age_cap {
                match sol.thresholds.prob_at(e, k) {
                    Some(p) => writeln!(f, "{},{},{},{}", e, k, p, sol.lambda)?,
                    None => writeln!(f, "{},{},,{}", e, k, sol.lambda)?,
                }
            }
        }
    }
    Ok(())
}

/// Plot-ready file kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    CumcostCurve,
    ThresholdTable,
}

/// Emit tidy plot files from previously written outputs in `dir`.
///
/// `cumcost_curve` reads `aggregate.csv` and writes `plot_cumcost.csv` with
/// columns `(t, algorithm, mean, stderr)`. `threshold_table` reads the two
/// threshold tables and writes `plot_thresholds.csv` with columns
/// `(E, C_or_K, kind, threshold, lambda)`.
pub fn emit_plot_data(dir: &Path, kind: PlotKind) -> Result<(), HarnessError> {
    match kind {
        PlotKind::CumcostCurve => {
            let aggregate = read_aggregate_csv(&dir.join("aggregate.csv"))?;
            let mut f = fs::File::create(dir.join("plot_cumcost.csv"))?;
            writeln!(f, "t,algorithm,mean,stderr")?;
            for curve in &aggregate.curves {
                for (i, (m, s)) in curve.mean.iter().zip(curve.stderr.iter()).enumerate() {
                    writeln!(f, "{},{},{},{}", i + 1, curve.algorithm, m, s)?;
                }
            }
            Ok(())
        }
        PlotKind::ThresholdTable => {
            let mut f = fs::File::create(dir.join("plot_thresholds.csv"))?;
            writeln!(f, "E,C_or_K,kind,threshold,lambda")?;
            for (file, kind_name) in [
                ("threshold_age.csv", "age"),
                ("threshold_prob.csv", "prob"),
            ] {
                let mut reader = csv::Reader::from_path(dir.join(file))?;
                for row in reader.records() {
                    let row = row?;
                    writeln!(
                        f,
                        "{},{},{},{},{}",
                        &row[0], &row[1], kind_name, &row[2], &row[3]
                    )?;
                }
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Sinusoid;

    fn nonstat_single_config() -> ExperimentConfig {
        ExperimentConfig {
            scenario: Scenario::NonstatSingle,
            horizon: 200,
            seeds: vec![1, 2],
            algorithms: vec!["aec-sw-ucrl2".into(), "sw-ucrl2".into()],
            delta: 0.05,
            discount: 0.99,
            whittle_tol: 1e-3,
            radius_scale: 1.0,
            window: WindowMode::Fixed(40),
            cost_mode: CostMode::Expected,
            lambda_grid: vec![],
            borl: BorlOptions::default(),
            sources: vec![SourceConfig {
                buffer: 7,
                sample_cost: 1,
                age_cap: 10,
                success_probs: vec![0.8, 0.2],
                schedule: ParamSchedule::Sinusoid {
                    lambda: Sinusoid { offset: 0.3, amplitude: 0.2, period: 4.0 },
                    q2: Sinusoid { offset: 0.5, amplitude: 0.2, period: 4.0 },
                },
            }],
        }
    }

    #[test]
    fn toml_round_trip_and_window_auto() {
        let text = r#"
scenario = "nonstat_single"
horizon = 5000
seeds = [1, 2, 3]
algorithms = ["aec-sw-ucrl2"]
window = "auto"

[[sources]]
buffer = 7
sample_cost = 1
age_cap = 10
success_probs = [0.8, 0.2]

[sources.schedule]
family = "sinusoid"
lambda = { offset = 0.3, amplitude = 0.2, period = 4.0 }
q2 = { offset = 0.5, amplitude = 0.2, period = 4.0 }
"#;
        let config = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(config.window, WindowMode::default());
        // S = 160, A = 2, T = 5000, budgets 999.8 each.
        assert_eq!(resolve_window(&config).unwrap(), 263);
    }

    #[test]
    fn stationary_auto_window_is_whole_horizon() {
        let text = r#"
scenario = "nonstat_single"
horizon = 400
algorithms = ["aec-sw-ucrl2"]

[[sources]]
buffer = 3
sample_cost = 1
age_cap = 5
success_probs = [0.9]

[sources.schedule]
family = "constant"
lambda = 0.4
q = [1.0]
"#;
        let config = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(resolve_window(&config).unwrap(), 400);
    }

    #[test]
    fn unknown_algorithm_rejected() {
        let mut config = nonstat_single_config();
        config.algorithms.push("frobnicate".into());
        assert!(matches!(
            config.validate(),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn experiment_outputs_are_deterministic_and_aggregated() {
        let config = nonstat_single_config();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let out1 = run_experiment(&config, Some(dir1.path())).unwrap();
        let out2 = run_experiment(&config, Some(dir2.path())).unwrap();
        assert_eq!(out1.aggregate, out2.aggregate);
        let a1 = fs::read(dir1.path().join("aggregate.csv")).unwrap();
        let a2 = fs::read(dir2.path().join("aggregate.csv")).unwrap();
        assert_eq!(a1, a2);

        // Aggregate mean equals the arithmetic mean of the per-seed curves.
        let curve = out1.aggregate.curve("aec-sw-ucrl2").unwrap();
        let by_seed: Vec<&RunTrace> = out1
            .traces
            .iter()
            .filter(|t| t.algorithm == "aec-sw-ucrl2")
            .collect();
        let t = 150;
        let want =
            (by_seed[0].cum_curve[t] + by_seed[1].cum_curve[t]) / 2.0;
        assert!((curve.mean[t] - want).abs() < 1e-12);

        // Trace files exist with the right row count.
        let trace_file = dir1.path().join("trace_aec-sw-ucrl2_seed1.csv");
        let text = fs::read_to_string(trace_file).unwrap();
        assert_eq!(text.lines().count(), 201);
    }

    #[test]
    fn plot_data_round_trips_aggregate_exactly() {
        let config = nonstat_single_config();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&config, Some(dir.path())).unwrap();
        emit_plot_data(dir.path(), PlotKind::CumcostCurve).unwrap();
        let back = read_aggregate_csv(&dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(back, out.aggregate);

        // The tidy file carries identical numbers under the plot schema.
        let text = fs::read_to_string(dir.path().join("plot_cumcost.csv")).unwrap();
        assert!(text.starts_with("t,algorithm,mean,stderr\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 200);
    }

    #[test]
    fn trace_has_one_row_per_slot_and_source() {
        let mut config = nonstat_single_config();
        config.horizon = 10;
        config.window = WindowMode::Fixed(5);
        config.seeds = vec![5];
        config.algorithms = vec!["aec-sw-ucrl2".into()];
        let out = run_experiment(&config, None).unwrap();
        assert_eq!(out.traces.len(), 1);
        assert_eq!(out.traces[0].records.len(), 10);
        // Cumulative cost is nondecreasing.
        let curve = &out.traces[0].cum_curve;
        assert!(curve.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn stationary_solve_emits_threshold_tables() {
        let text = r#"
scenario = "stationary_single"
horizon = 1
seeds = [1]
discount = 0.95
lambda_grid = [0.5]

[[sources]]
buffer = 3
sample_cost = 1
age_cap = 6
success_probs = [0.9, 0.4]

[sources.schedule]
family = "constant"
lambda = 0.5
q = [0.5, 0.5]
"#;
        let config = ExperimentConfig::from_toml(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let solutions = solve_stationary(&config, Some(dir.path())).unwrap();
        assert_eq!(solutions.len(), 1);
        assert!(solutions[0].monotone_in_age);
        let age = fs::read_to_string(dir.path().join("threshold_age.csv")).unwrap();
        assert!(age.starts_with("E,C,K_th,lambda\n"));
        assert_eq!(age.lines().count(), 1 + 3 * 2);
        emit_plot_data(dir.path(), PlotKind::ThresholdTable).unwrap();
        let plot = fs::read_to_string(dir.path().join("plot_thresholds.csv")).unwrap();
        assert!(plot.starts_with("E,C_or_K,kind,threshold,lambda\n"));
    }
}
