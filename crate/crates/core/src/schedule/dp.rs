//! Stylised scheduling model shared by the exact DP oracle, exact policy
//! evaluation and the Monte-Carlo baselines.
//!
//! Each topic's state is `(practices, successes, steps since last success)`.
//! Practicing shrinks the ability variance by the expected Fisher
//! information at p = ½, a success shrinks the forgetting rate by `1 - ξ`
//! and resets the retention clock, and misconception mass decays with every
//! practice. The reward of practicing a topic is the scheduler's expected
//! gain evaluated in that state.

use std::collections::HashMap;

use itertools::Itertools;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rank;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTopic {
    pub var0: f64,
    pub a: f64,
    /// Normalized weight `w̃` of the topic in its practice items.
    pub weight: f64,
    pub lambda0: f64,
    pub mass0: f64,
    /// Probability that a practice is an effortful success.
    pub success: f64,
    pub cost: f64,
    /// Steps since the last success at the start of the horizon.
    pub since0: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulingInstance {
    pub topics: Vec<InstanceTopic>,
    pub budget: usize,
    pub horizon: usize,
    /// Time elapsed per step.
    pub dt: f64,
    pub shrink: f64,
    pub mass_decay: f64,
    pub w_info: f64,
    pub w_ret: f64,
    pub w_misc: f64,
    pub lambda_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopicCell {
    pub practiced: u16,
    pub successes: u16,
    pub since: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Index,
    RoundRobin,
    UniformRandom,
}

impl SchedulingInstance {
    pub fn validate(&self) -> Result<()> {
        if self.topics.is_empty() || self.budget == 0 {
            return Err(Error::Config(
                "instance needs topics and a budget >= 1".into(),
            ));
        }
        for t in &self.topics {
            if !(t.var0 > 0.0
                && t.cost > 0.0
                && (0.0..=1.0).contains(&t.success)
                && t.lambda0 >= 0.0)
            {
                return Err(Error::Domain(format!("invalid instance topic {t:?}")));
            }
        }
        Ok(())
    }

    pub fn initial(&self) -> Vec<TopicCell> {
        self.topics
            .iter()
            .map(|t| TopicCell {
                practiced: 0,
                successes: 0,
                since: t.since0,
            })
            .collect()
    }

    fn slots(&self) -> usize {
        self.budget.min(self.topics.len())
    }

    pub fn variance(&self, t: usize, practiced: u16) -> f64 {
        let p = &self.topics[t];
        1.0 / (1.0 / p.var0 + practiced as f64 * p.a * p.a * 0.25 * p.weight * p.weight)
    }

    pub fn rho(&self, t: usize, cell: TopicCell) -> f64 {
        let lambda = self.topics[t].lambda0 * (1.0 - self.shrink).powi(cell.successes as i32);
        (-lambda * cell.since as f64 * self.dt).exp()
    }

    pub fn hazard(&self, t: usize, cell: TopicCell) -> f64 {
        self.topics[t].lambda0 * (1.0 - self.shrink).powi(cell.successes as i32) * self.rho(t, cell)
    }

    pub fn reward(&self, t: usize, cell: TopicCell) -> f64 {
        let info = self.variance(t, cell.practiced) - self.variance(t, cell.practiced + 1);
        let mass = self.topics[t].mass0 * self.mass_decay.powi(cell.practiced as i32);
        self.w_info * info + self.w_ret * (1.0 - self.rho(t, cell)) + self.w_misc * mass
    }

    pub fn index(&self, t: usize, cell: TopicCell) -> f64 {
        self.reward(t, cell) / self.topics[t].cost + self.lambda_star * self.hazard(t, cell)
    }

    /// Topics the index policy practices in `state`.
    pub fn index_choice(&self, state: &[TopicCell]) -> Vec<usize> {
        let idx: Vec<f64> = (0..state.len()).map(|t| self.index(t, state[t])).collect();
        let rho: Vec<f64> = (0..state.len()).map(|t| self.rho(t, state[t])).collect();
        let mut chosen: Vec<usize> = rank(&idx, &rho).into_iter().take(self.slots()).collect();
        chosen.sort_unstable();
        chosen
    }

    fn advance(&self, state: &[TopicCell], chosen: &[usize], outcome: &[bool]) -> Vec<TopicCell> {
        let mut next: Vec<TopicCell> = state.to_vec();
        for c in next.iter_mut() {
            c.since = c.since.saturating_add(1);
        }
        for (&t, &ok) in chosen.iter().zip(outcome) {
            next[t].practiced += 1;
            if ok {
                next[t].successes += 1;
                next[t].since = 1;
            }
        }
        next
    }

    /// Immediate reward plus the expectation of `future` over success outcomes.
    fn expected_step(
        &self,
        state: &[TopicCell],
        chosen: &[usize],
        mut future: impl FnMut(Vec<TopicCell>) -> Result<f64>,
    ) -> Result<f64> {
        let immediate: f64 = chosen.iter().map(|&t| self.reward(t, state[t])).sum();
        let mut expected = 0.0;
        for mask in 0..(1u32 << chosen.len()) {
            let outcome: Vec<bool> = (0..chosen.len()).map(|i| mask & (1 << i) != 0).collect();
            let prob: f64 = chosen
                .iter()
                .zip(&outcome)
                .map(|(&t, &ok)| {
                    if ok {
                        self.topics[t].success
                    } else {
                        1.0 - self.topics[t].success
                    }
                })
                .product();
            if prob == 0.0 {
                continue;
            }
            expected += prob * future(self.advance(state, chosen, &outcome))?;
        }
        Ok(immediate + expected)
    }
}

struct Memo {
    table: HashMap<(usize, Vec<TopicCell>), f64>,
    limit: usize,
}

impl Memo {
    fn new(limit: usize) -> Self {
        Memo {
            table: HashMap::new(),
            limit,
        }
    }

    fn check(&self) -> Result<()> {
        if self.table.len() > self.limit {
            return Err(Error::Resource(format!(
                "dynamic program exceeded {} states",
                self.limit
            )));
        }
        Ok(())
    }
}

pub const DEFAULT_STATE_LIMIT: usize = 100_000;

fn optimal(
    inst: &SchedulingInstance,
    h: usize,
    state: Vec<TopicCell>,
    memo: &mut Memo,
) -> Result<f64> {
    if h == 0 {
        return Ok(0.0);
    }
    if let Some(v) = memo.table.get(&(h, state.clone())) {
        return Ok(*v);
    }
    let mut best = f64::NEG_INFINITY;
    for chosen in (0..state.len()).combinations(inst.slots()) {
        let v = inst.expected_step(&state, &chosen, |next| optimal(inst, h - 1, next, memo))?;
        if v > best {
            best = v;
        }
    }
    memo.table.insert((h, state), best);
    memo.check()?;
    Ok(best)
}

/// Exact optimal expected reward over the horizon by memoized dynamic
/// programming over every budget-feasible selection.
pub fn dp_optimal_value(inst: &SchedulingInstance, state_limit: usize) -> Result<f64> {
    inst.validate()?;
    optimal(
        inst,
        inst.horizon,
        inst.initial(),
        &mut Memo::new(state_limit),
    )
}

fn follow_index(
    inst: &SchedulingInstance,
    h: usize,
    state: Vec<TopicCell>,
    memo: &mut Memo,
) -> Result<f64> {
    if h == 0 {
        return Ok(0.0);
    }
    if let Some(v) = memo.table.get(&(h, state.clone())) {
        return Ok(*v);
    }
    let chosen = inst.index_choice(&state);
    let v = inst.expected_step(&state, &chosen, |next| {
        follow_index(inst, h - 1, next, memo)
    })?;
    memo.table.insert((h, state), v);
    memo.check()?;
    Ok(v)
}

/// Exact expected reward of the index policy over the horizon.
pub fn index_policy_value(inst: &SchedulingInstance, state_limit: usize) -> Result<f64> {
    inst.validate()?;
    follow_index(
        inst,
        inst.horizon,
        inst.initial(),
        &mut Memo::new(state_limit),
    )
}

/// Realised reward of `policy` along one trajectory. Topic `t` succeeds at
/// step `h` when `uniforms[h][t] < success_t`, so policies compared on the
/// same uniforms share every outcome draw. `rng` is used only by the
/// uniform-random policy to pick topics.
pub fn simulate_policy<R: Rng>(
    inst: &SchedulingInstance,
    policy: Policy,
    uniforms: &[Vec<f64>],
    rng: &mut R,
) -> Result<f64> {
    inst.validate()?;
    if uniforms.len() < inst.horizon || uniforms.iter().any(|u| u.len() < inst.topics.len()) {
        return Err(Error::Shape {
            expected: inst.horizon,
            got: uniforms.len(),
        });
    }
    let n = inst.topics.len();
    let mut state = inst.initial();
    let mut total = 0.0;
    for (h, draws) in uniforms.iter().enumerate().take(inst.horizon) {
        let mut chosen: Vec<usize> = match policy {
            Policy::Index => inst.index_choice(&state),
            Policy::RoundRobin => (0..inst.slots())
                .map(|j| (h * inst.slots() + j) % n)
                .collect(),
            Policy::UniformRandom => sample(rng, n, inst.slots()).into_vec(),
        };
        chosen.sort_unstable();
        chosen.dedup();
        total += chosen
            .iter()
            .map(|&t| inst.reward(t, state[t]))
            .sum::<f64>();
        let outcome: Vec<bool> = chosen
            .iter()
            .map(|&t| draws[t] < inst.topics[t].success)
            .collect();
        state = inst.advance(&state, &chosen, &outcome);
    }
    Ok(total)
}
