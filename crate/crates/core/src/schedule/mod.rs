//! Budgeted practice allocation by priority index, and session assembly.

mod dp;
mod session;

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnose::{MisconceptionPosterior, MixtureModel};
use crate::error::{Error, Result};
use crate::model::{
    neutral_context, response_probability, retention, updated_variance, Item, LearnerState,
    ResponseModelParams, TopicBelief,
};

pub use dp::{
    dp_optimal_value, index_policy_value, simulate_policy, InstanceTopic, Policy,
    SchedulingInstance, TopicCell, DEFAULT_STATE_LIMIT,
};
pub use session::{compose_session, jaccard_distance, Phase, SessionEntry, SessionPlan};

/// Snapshot of one topic as seen by the scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicScheduleState {
    pub topic: usize,
    pub belief: TopicBelief,
    pub rho: f64,
    pub misc_mass: f64,
    pub reference_item: Option<Item>,
    /// Success probability on the reference item at neutral context.
    pub reference_p: f64,
    /// Normalized weight of this topic in the reference item.
    pub reference_weight: f64,
    /// Learner response times on this topic near the reference difficulty.
    pub matched_times: Vec<f64>,
    /// Population or bank-wide median response time, used without history.
    pub fallback_time: f64,
}

impl TopicScheduleState {
    /// Builds the scheduler view of `topic`. The reference item is the bank
    /// item on the topic whose difficulty is closest to the learner's mean.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        learner: &LearnerState,
        topic: usize,
        bank: &[Item],
        model: Option<&MixtureModel>,
        now: f64,
        fallback_time: f64,
        response: &ResponseModelParams,
        sched: &SchedulerParams,
    ) -> Result<Self> {
        let belief = *learner.topics.get(topic).ok_or(Error::Index {
            index: topic,
            len: learner.topics.len(),
        })?;
        let reference_item = bank
            .iter()
            .filter(|it| it.loads(topic))
            .min_by(|x, y| (x.b - belief.mu).abs().total_cmp(&(y.b - belief.mu).abs()))
            .cloned();
        let (reference_p, reference_weight) = match &reference_item {
            Some(item) => {
                let (tau, s) = neutral_context(response);
                let p = response_probability(learner, item, tau, s, response)?;
                let w = response.normalized_weights(item)?;
                let idx = item.concepts.iter().position(|&t| t == topic).unwrap_or(0);
                (p, w[idx])
            }
            None => (0.5, 1.0),
        };
        let misc_mass = match model {
            Some(m) if learner.misconception_posterior.len() == m.k() => MisconceptionPosterior {
                pi: learner.misconception_posterior.clone(),
            }
            .topic_mass(m, topic),
            _ => 0.0,
        };
        let ref_b = reference_item.as_ref().map(|i| i.b).unwrap_or(belief.mu);
        let matched_times = learner
            .history
            .iter()
            .filter(|h| {
                h.topics.contains(&topic) && (h.b - ref_b).abs() <= sched.matched_difficulty
            })
            .map(|h| h.obs.tau)
            .collect();
        Ok(TopicScheduleState {
            topic,
            belief,
            rho: retention(&belief, now),
            misc_mass,
            reference_item,
            reference_p,
            reference_weight,
            matched_times,
            fallback_time,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerParams {
    pub lambda_star: f64,
    pub budget: usize,
    pub w_info: f64,
    pub w_ret: f64,
    pub w_misc: f64,
    pub cost_floor: f64,
    /// Difficulty window (logits) for matching historical response times.
    pub matched_difficulty: f64,
    /// Phase shares: easy, on-level, slightly hard, cross-topic, recap.
    pub ramp: [f64; 5],
    pub session_length: usize,
    /// Half-width of the on-level band around μ.
    pub level_band: f64,
    /// Upper edge of the slightly-hard band above μ.
    pub hard_limit: f64,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        SchedulerParams {
            lambda_star: 1.0,
            budget: 3,
            w_info: 1.0,
            w_ret: 1.0,
            w_misc: 1.0,
            cost_floor: 1.0,
            matched_difficulty: 0.5,
            ramp: [0.15, 0.35, 0.2, 0.15, 0.15],
            session_length: 20,
            level_band: 0.5,
            hard_limit: 1.0,
        }
    }
}

impl SchedulerParams {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be >= 1".into()));
        }
        if [self.lambda_star, self.w_info, self.w_ret, self.w_misc]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::Config("scheduler weights must be >= 0".into()));
        }
        if !(self.cost_floor > 0.0) {
            return Err(Error::Config("cost floor must be > 0".into()));
        }
        let total: f64 = self.ramp.iter().sum();
        if self.ramp.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ramp fractions must be >= 0 and sum to 1 (sum = {total})"
            )));
        }
        Ok(())
    }
}

/// `H = λ·exp(-λ·[now - L]₊) = λ·ρ`.
pub fn hazard(state: &TopicScheduleState, now: f64) -> f64 {
    state.belief.lambda * retention(&state.belief, now)
}

/// Variance reduction on the reference item plus retention deficit plus
/// misconception mass.
pub fn expected_gain(state: &TopicScheduleState, params: &SchedulerParams) -> Result<f64> {
    let item = state
        .reference_item
        .as_ref()
        .ok_or_else(|| Error::Config(format!("topic {} has no reference item", state.topic)))?;
    let var = state.belief.var;
    let next = updated_variance(var, item.a, state.reference_p, state.reference_weight);
    Ok(params.w_info * (var - next)
        + params.w_ret * (1.0 - state.rho)
        + params.w_misc * state.misc_mass)
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median matched response time, else the fallback, floored.
pub fn expected_cost(state: &TopicScheduleState, params: &SchedulerParams) -> f64 {
    median(&state.matched_times)
        .unwrap_or(state.fallback_time)
        .max(params.cost_floor)
}

/// `I = G/C + λ*·H`.
pub fn priority_index(
    state: &TopicScheduleState,
    params: &SchedulerParams,
    now: f64,
) -> Result<f64> {
    Ok(expected_gain(state, params)? / expected_cost(state, params)
        + params.lambda_star * hazard(state, now))
}

/// Orders candidates by index (desc), then retention (asc), then input order.
pub(crate) fn rank(indices: &[f64], rhos: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..indices.len()).collect();
    order.sort_by(|&a, &b| match indices[b].total_cmp(&indices[a]) {
        Ordering::Equal => rhos[a].total_cmp(&rhos[b]).then(a.cmp(&b)),
        o => o,
    });
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    /// `(topic, index)` for every input state, in input order.
    pub indices: Vec<(usize, f64)>,
    /// Selected topics, highest priority first.
    pub selected: Vec<usize>,
}

/// Picks the `min(B, |T|)` topics with the largest index.
pub fn select_topics(
    states: &[TopicScheduleState],
    params: &SchedulerParams,
    now: f64,
) -> Result<ScheduleDecision> {
    params.validate()?;
    let indices: Vec<f64> = states
        .par_iter()
        .map(|s| priority_index(s, params, now))
        .collect::<Result<_>>()?;
    let rhos: Vec<f64> = states.iter().map(|s| s.rho).collect();
    let selected = rank(&indices, &rhos)
        .into_iter()
        .take(params.budget)
        .map(|i| states[i].topic)
        .collect();
    Ok(ScheduleDecision {
        indices: states.iter().map(|s| s.topic).zip(indices).collect(),
        selected,
    })
}

#[cfg(test)]
mod tests;
