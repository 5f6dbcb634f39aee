//! Reference policies for the comparison runs.
//!
//! All four baselines ride the same simulator streams as the algorithms
//! under test, so a shared seed isolates the policy effect.

use crate::blind::BlindConfig;
use crate::borl::{DeltaWMode, FeedbackMode};
use crate::env::{CostMode, ParamSchedule, SourceModel};
use crate::learner::{LearnError, RunError};
use crate::multi::{MultiConfig, ProbeRule, SampleRule};
use crate::trace::RunTrace;

/// Success-probability floor of the uniform-random baseline's sampling rule
/// (the probed source samples iff energized and `p(C)` reaches this).
pub const RANDOM_SAMPLE_FLOOR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    /// Standard sliding-window learner: no threshold shortcut and no
    /// channel probing (acts on the marginal `(E, K)` state).
    SwUcrl2,
    /// Bandit-over-learning master over the standard learner.
    Borl,
    /// Probe the oldest energized source, then the plain optimistic
    /// sampling policy.
    MaSwUcrl2,
    /// Probe uniformly at random; sample on a fixed probability floor.
    Random,
}

/// Run one baseline. `window` is required for the fixed-window kinds.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline(
    kind: BaselineKind,
    models: &[SourceModel],
    schedules: &[ParamSchedule],
    cost_mode: CostMode,
    seed: u64,
    horizon: u64,
    window: Option<u64>,
    delta: f64,
    radius_scale: f64,
    algorithm: &str,
) -> Result<RunTrace, RunError> {
    let need_window = || {
        window.ok_or_else(|| {
            RunError::from(LearnError::Invalid(format!(
                "{algorithm} needs a window size"
            )))
        })
    };
    match kind {
        BaselineKind::SwUcrl2 => {
            let cfg = BlindConfig {
                window: need_window()?,
                delta,
                radius_scale,
                evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
            };
            crate::blind::run_blind(
                &models[0], &schedules[0], cost_mode, seed, horizon, &cfg, algorithm,
            )
        }
        BaselineKind::Borl => {
            let cfg = BlindConfig {
                window: horizon, // overridden per block by the master
                delta,
                radius_scale,
                evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
            };
            crate::blind::run_blind_borl(
                &models[0],
                &schedules[0],
                cost_mode,
                seed,
                horizon,
                &cfg,
                DeltaWMode::Log,
                FeedbackMode::Reward,
                algorithm,
            )
        }
        BaselineKind::MaSwUcrl2 => {
            let cfg = MultiConfig {
                window: need_window()?,
                delta,
                discount: 0.9,
                whittle_tol: 0.05,
                probe_rule: ProbeRule::MaxAge,
                sample_rule: SampleRule::PolicyOnly,
                radius_scale,
                evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
            };
            crate::multi::run_multi(models, schedules, cost_mode, seed, horizon, &cfg, algorithm)
        }
        BaselineKind::Random => {
            let cfg = MultiConfig {
                window: horizon.max(1),
                delta,
                discount: 0.9,
                whittle_tol: 0.05,
                probe_rule: ProbeRule::UniformRandom,
                sample_rule: SampleRule::FixedProb(RANDOM_SAMPLE_FLOOR),
                radius_scale,
                evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
            };
            crate::multi::run_multi(models, schedules, cost_mode, seed, horizon, &cfg, algorithm)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ChannelModel, Sinusoid, SourceState};

    fn model() -> SourceModel {
        SourceModel::new(7, 1, 10, ChannelModel::new(vec![0.8, 0.2]).unwrap()).unwrap()
    }

    fn sinusoid(l_off: f64, q_off: f64) -> ParamSchedule {
        ParamSchedule::Sinusoid {
            lambda: Sinusoid { offset: l_off, amplitude: 0.2, period: 4.0 },
            q2: Sinusoid { offset: q_off, amplitude: 0.2, period: 4.0 },
        }
    }

    #[test]
    fn random_probe_frequencies_are_uniform() {
        let models = vec![model(), model(), model()];
        let schedules = vec![sinusoid(0.3, 0.3), sinusoid(0.5, 0.5), sinusoid(0.7, 0.7)];
        let trace = run_baseline(
            BaselineKind::Random,
            &models,
            &schedules,
            CostMode::Expected,
            21,
            10_000,
            None,
            0.05,
            1.0,
            "random",
        )
        .unwrap();
        let mut counts = [0u64; 3];
        for r in &trace.records {
            if r.probe == 1 {
                counts[r.source] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        assert_eq!(total, 10_000);
        for c in counts {
            let freq = c as f64 / total as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "{freq}");
        }
        // Sampling only on the good channel (p = 0.8 >= 0.5 > 0.2).
        for r in &trace.records {
            if r.sample == 1 {
                assert_eq!(r.channel, 1);
            }
        }
    }

    #[test]
    fn max_age_baseline_probes_oldest_energized() {
        let models = vec![model(), model(), model()];
        let schedules = vec![sinusoid(0.5, 0.5), sinusoid(0.5, 0.5), sinusoid(0.5, 0.5)];
        let mut runner = crate::multi::MultiRunner::with_initial(
            models.clone(),
            schedules.clone(),
            CostMode::Expected,
            3,
            &[
                SourceState { energy: 5, age: 2 },
                SourceState { energy: 5, age: 9 },
                SourceState { energy: 5, age: 5 },
            ],
        )
        .unwrap();
        let cfg = MultiConfig {
            window: 50,
            delta: 0.05,
            discount: 0.9,
            whittle_tol: 0.05,
            probe_rule: ProbeRule::MaxAge,
            sample_rule: SampleRule::PolicyOnly,
            radius_scale: 1.0,
            evi_sweep_cap: crate::learner::DEFAULT_EVI_SWEEP_CAP,
        };
        runner.run_block(&cfg, 1).unwrap();
        let trace = runner.into_trace("ma-sw-ucrl2", 3);
        let probed: Vec<_> = trace.records.iter().filter(|r| r.probe == 1).collect();
        assert_eq!(probed.len(), 1);
        assert_eq!(probed[0].source, 1);
    }
}
