//! Index policy against the exact optimum and against simple baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{mean, mean_lower_bound};
use super::{derive_seed, ExperimentReport, StepRecord};
use crate::error::{Error, Result};
use crate::schedule::{
    dp_optimal_value, index_policy_value, simulate_policy, InstanceTopic, Policy,
    SchedulingInstance, DEFAULT_STATE_LIMIT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub seed: u64,
    pub small_instances: usize,
    pub small_max_topics: usize,
    pub small_max_horizon: usize,
    pub approximation: f64,
    /// Required share of small instances meeting the approximation ratio.
    pub pass_rate: f64,
    pub baseline_topics: usize,
    pub baseline_horizon: usize,
    pub baseline_budget: usize,
    pub baseline_seeds: usize,
    pub confidence: f64,
    pub bootstrap_reps: usize,
    /// Horizons of the regret trend, each averaged over `regret_instances`.
    pub regret_horizons: Vec<usize>,
    pub regret_topics: usize,
    pub regret_instances: usize,
    pub state_limit: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            seed: 11,
            small_instances: 100,
            small_max_topics: 3,
            small_max_horizon: 5,
            approximation: 0.9,
            pass_rate: 0.95,
            baseline_topics: 20,
            baseline_horizon: 60,
            baseline_budget: 3,
            baseline_seeds: 100,
            confidence: 0.99,
            bootstrap_reps: 2000,
            regret_horizons: vec![1, 2, 3, 4, 5],
            regret_topics: 3,
            regret_instances: 30,
            state_limit: DEFAULT_STATE_LIMIT,
        }
    }
}

/// Random instance with topic parameters drawn from fixed ranges.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    topics: usize,
    horizon: usize,
    budget: usize,
) -> SchedulingInstance {
    let topics = (0..topics)
        .map(|_| InstanceTopic {
            var0: rng.random_range(0.3..2.0),
            a: rng.random_range(0.5..2.0),
            weight: 1.0,
            lambda0: rng.random_range(0.02..0.5),
            mass0: if rng.random::<bool>() {
                rng.random_range(0.0..0.5)
            } else {
                0.0
            },
            success: rng.random_range(0.2..0.9),
            cost: rng.random_range(0.5..2.0),
            since0: rng.random_range(0..=5),
        })
        .collect();
    SchedulingInstance {
        topics,
        budget,
        horizon,
        dt: 1.0,
        shrink: 0.05,
        mass_decay: 0.6,
        w_info: 1.0,
        w_ret: 1.0,
        w_misc: 1.0,
        lambda_star: 1.0,
    }
}

fn record(replication: usize, step: usize, arm: &str, pi: f64, value: f64) -> StepRecord {
    StepRecord {
        replication: replication as u64,
        step: step as u32,
        arm: arm.into(),
        item: String::new(),
        y: None,
        pi,
        value,
    }
}

fn small_suite(cfg: &SchedulerConfig, unit_cost: bool) -> Result<Vec<(f64, f64)>> {
    (0..cfg.small_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 1), i as u64));
            let topics = rng.random_range(2..=cfg.small_max_topics);
            let horizon = rng.random_range(2..=cfg.small_max_horizon.max(2));
            let mut inst = random_instance(&mut rng, topics, horizon, 1);
            if unit_cost {
                inst.topics.iter_mut().for_each(|t| t.cost = 1.0);
            }
            Ok((
                index_policy_value(&inst, cfg.state_limit)?,
                dp_optimal_value(&inst, cfg.state_limit)?,
            ))
        })
        .collect()
}

fn baseline_suite(cfg: &SchedulerConfig, unit_cost: bool) -> Result<Vec<[f64; 3]>> {
    (0..cfg.baseline_seeds)
        .into_par_iter()
        .map(|s| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 2), s as u64));
            let mut inst = random_instance(
                &mut rng,
                cfg.baseline_topics,
                cfg.baseline_horizon,
                cfg.baseline_budget,
            );
            if unit_cost {
                inst.topics.iter_mut().for_each(|t| t.cost = 1.0);
            }
            let uniforms: Vec<Vec<f64>> = (0..inst.horizon)
                .map(|_| (0..inst.topics.len()).map(|_| rng.random()).collect())
                .collect();
            let mut out = [0.0; 3];
            for (k, policy) in [Policy::Index, Policy::RoundRobin, Policy::UniformRandom]
                .into_iter()
                .enumerate()
            {
                let mut picker =
                    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 3), s as u64));
                out[k] = simulate_policy(&inst, policy, &uniforms, &mut picker)?;
            }
            Ok(out)
        })
        .collect()
}

fn ratios(small: &[(f64, f64)]) -> Vec<f64> {
    small
        .iter()
        .map(|(v, d)| if *d > 0.0 { v / d } else { 1.0 })
        .collect()
}

/// Compares the index policy with the exact optimum on small instances, with
/// round-robin and uniform-random selection on large ones, and tabulates the
/// optimality gap by horizon. The same instances with every cost set to 1
/// are summarised under `unit_cost_*` keys.
pub fn run_scheduler_experiment(cfg: &SchedulerConfig) -> Result<ExperimentReport> {
    if cfg.small_max_topics < 2
        || cfg.small_max_horizon < 1
        || cfg.baseline_seeds < 2
        || cfg.baseline_topics == 0
    {
        return Err(Error::Config(
            "scheduler experiment sizes are too small".into(),
        ));
    }
    let mut report = ExperimentReport::new("scheduler", cfg.seed);

    let small = small_suite(cfg, false)?;
    let ratio = ratios(&small);
    let meeting = ratio
        .iter()
        .filter(|r| **r >= cfg.approximation - 1e-12)
        .count();
    let rate = meeting as f64 / ratio.len().max(1) as f64;
    for (i, ((v, d), r)) in small.iter().zip(&ratio).enumerate() {
        report.records.push(record(i, 0, "small_index", *r, *v));
        report.records.push(record(i, 0, "small_dp", *r, *d));
    }
    report.set("small_mean_ratio", mean(&ratio));
    report.set(
        "small_min_ratio",
        ratio.iter().copied().fold(f64::INFINITY, f64::min),
    );
    report.set("small_pass_rate", rate);
    report.check(
        "approximation",
        rate >= cfg.pass_rate,
        format!(
            "{meeting}/{} instances with index >= {} x optimum",
            ratio.len(),
            cfg.approximation
        ),
    );
    let unit = ratios(&small_suite(cfg, true)?);
    report.set("unit_cost_small_mean_ratio", mean(&unit));
    report.set(
        "unit_cost_small_pass_rate",
        unit.iter()
            .filter(|r| **r >= cfg.approximation - 1e-12)
            .count() as f64
            / unit.len().max(1) as f64,
    );

    let baseline = baseline_suite(cfg, false)?;
    for (s, v) in baseline.iter().enumerate() {
        for (k, arm) in ["index", "round_robin", "uniform_random"]
            .iter()
            .enumerate()
        {
            report.records.push(record(s, 0, arm, 0.0, v[k]));
        }
    }
    let unit = baseline_suite(cfg, true)?;
    for (k, name) in [(1, "round_robin"), (2, "uniform_random")] {
        let seed = derive_seed(cfg.seed, 10 + k as u64);
        let diffs: Vec<f64> = baseline.iter().map(|v| v[0] - v[k]).collect();
        let lower = mean_lower_bound(&diffs, cfg.confidence, cfg.bootstrap_reps, seed);
        report.set(&format!("gain_index_minus_{name}"), mean(&diffs));
        report.set(&format!("gain_lower_{name}"), lower);
        report.check(
            &format!("beats_{name}"),
            lower >= 0.0,
            format!(
                "mean paired gain {:.4}, one-sided {:.0}% lower bound {lower:.4}",
                mean(&diffs),
                cfg.confidence * 100.0
            ),
        );
        let diffs: Vec<f64> = unit.iter().map(|v| v[0] - v[k]).collect();
        report.set(&format!("unit_cost_gain_index_minus_{name}"), mean(&diffs));
        report.set(
            &format!("unit_cost_gain_lower_{name}"),
            mean_lower_bound(&diffs, cfg.confidence, cfg.bootstrap_reps, seed),
        );
    }
    report.set(
        "gain_index_mean",
        mean(&baseline.iter().map(|v| v[0]).collect::<Vec<_>>()),
    );

    for &h in &cfg.regret_horizons {
        let gaps: Vec<f64> = (0..cfg.regret_instances)
            .into_par_iter()
            .map(|i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 4), i as u64));
                let inst = random_instance(&mut rng, cfg.regret_topics, h, 1);
                Ok(dp_optimal_value(&inst, cfg.state_limit)?
                    - index_policy_value(&inst, cfg.state_limit)?)
            })
            .collect::<Result<_>>()?;
        report.set(&format!("regret@{h}"), mean(&gaps));
        report
            .records
            .push(record(0, h, "regret", 0.0, mean(&gaps)));
    }
    Ok(report)
}
