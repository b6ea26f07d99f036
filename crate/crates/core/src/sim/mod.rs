//! Ground-truth synthetic learners and the experiment harness.

mod counterfactual;
mod edgescore;
mod scheduler;
pub mod stats;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{shortcut_margin, MisconceptionRule};
use crate::model::{
    confidence_effect, sigmoid, time_effect, Item, Observation, ResponseModelParams,
};

pub use counterfactual::{run_counterfactual_experiment, CounterfactualConfig};
pub use edgescore::{run_edgescore_experiment, EdgeScoreConfig};
pub use scheduler::{random_instance, run_scheduler_experiment, SchedulerConfig};

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of stream `index` under `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveMisconception {
    pub rule: MisconceptionRule,
    /// Probability of applying the shortcut on an item the rule covers.
    pub adoption: f64,
    pub distractor: usize,
    /// Median response time when applying the shortcut.
    pub fast_time: f64,
}

/// Ground-truth response process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorParams {
    /// Coefficients of the true response model; `mixture_weights` are ignored.
    pub response: ResponseModelParams,
    /// Median time at `b = θ`.
    pub time_median: f64,
    /// Log-time change per logit of `b - θ`.
    pub time_difficulty: f64,
    pub time_sigma: f64,
    pub fast_sigma: f64,
    /// Beta concentration of confidence around the success probability.
    pub confidence_concentration: f64,
    /// Beta parameters of confidence when applying a shortcut.
    pub shortcut_confidence: (f64, f64),
}

impl Default for BehaviorParams {
    fn default() -> Self {
        BehaviorParams {
            response: ResponseModelParams::default(),
            time_median: 18.0,
            time_difficulty: 0.3,
            time_sigma: 0.4,
            fast_sigma: 0.3,
            confidence_concentration: 6.0,
            shortcut_confidence: (8.0, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLearner {
    pub true_theta: Vec<f64>,
    pub true_lambda: Vec<f64>,
    pub last_retrieval: Vec<f64>,
    pub misconceptions: Vec<ActiveMisconception>,
    pub learning_gain: f64,
    pub behavior: BehaviorParams,
    pub seed: u64,
    /// Responses drawn so far; each response uses its own derived stream.
    pub step: u64,
}

/// What the learner did on one item, besides the observation itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Shortcut,
    Normal,
}

impl SyntheticLearner {
    pub fn new(true_theta: Vec<f64>, seed: u64) -> Self {
        let n = true_theta.len();
        SyntheticLearner {
            true_theta,
            true_lambda: vec![0.0; n],
            last_retrieval: vec![0.0; n],
            misconceptions: Vec::new(),
            learning_gain: 0.0,
            behavior: BehaviorParams::default(),
            seed,
            step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .misconceptions
            .iter()
            .any(|m| !(0.0..=1.0).contains(&m.adoption))
        {
            return Err(Error::Domain(
                "adoption probabilities must lie in [0, 1]".into(),
            ));
        }
        if !(self.learning_gain >= 0.0) {
            return Err(Error::Domain("learning gain must be >= 0".into()));
        }
        if self.true_lambda.len() != self.true_theta.len()
            || self.last_retrieval.len() != self.true_theta.len()
        {
            return Err(Error::Shape {
                expected: self.true_theta.len(),
                got: self.true_lambda.len(),
            });
        }
        Ok(())
    }

    pub fn retention(&self, topic: usize, now: f64) -> f64 {
        (-self.true_lambda[topic] * (now - self.last_retrieval[topic]).max(0.0)).exp()
    }

    /// Retention-weighted ability probed by `item` (equal topic weights).
    pub fn effective_theta(&self, item: &Item, now: f64) -> Result<f64> {
        if let Some(&t) = item.concepts.iter().find(|&&t| t >= self.true_theta.len()) {
            return Err(Error::Index {
                index: t,
                len: self.true_theta.len(),
            });
        }
        let n = item.concepts.len().max(1) as f64;
        Ok(item
            .concepts
            .iter()
            .map(|&t| self.retention(t, now) * self.true_theta[t])
            .sum::<f64>()
            / n)
    }

    /// True success probability for fixed response time and confidence.
    pub fn success_probability(&self, item: &Item, tau: f64, s: f64, now: f64) -> Result<f64> {
        let r = &self.behavior.response;
        let z = item.a * (self.effective_theta(item, now)? - item.b)
            + r.beta_tau * time_effect(tau, r)?
            + r.beta_s * confidence_effect(s, r)?;
        Ok(sigmoid(z))
    }

    fn stream(&mut self) -> ChaCha8Rng {
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.step));
        self.step += 1;
        rng
    }

    fn applicable(&self, item: &Item) -> Option<(usize, f64)> {
        let attrs = item.attributes.as_ref()?;
        self.misconceptions.iter().enumerate().find_map(|(i, m)| {
            if item.rules.iter().any(|r| *r == m.rule.name) {
                shortcut_margin(&m.rule, attrs).ok().map(|d| (i, d))
            } else {
                None
            }
        })
    }

    fn learn(&mut self, item: &Item, obs: &Observation, now: f64) -> Result<()> {
        if obs.y
            && time_effect(obs.tau, &self.behavior.response)?
                >= self.behavior.response.effort_threshold
        {
            for &t in &item.concepts {
                self.true_theta[t] += self.learning_gain;
                self.last_retrieval[t] = now;
            }
        }
        Ok(())
    }

    /// Draws one response. Every response consumes its own derived random
    /// stream, so two copies of a learner posed different items still share
    /// the adoption, timing and confidence draws step by step.
    pub fn respond(&mut self, item: &Item, now: f64) -> Result<(Observation, ResponseKind)> {
        let mut rng = self.stream();
        let u_adopt: f64 = rng.random();
        let u_correct: f64 = rng.random();
        let u_distractor: f64 = rng.random();
        let z_time: f64 = rand_distr::StandardNormal.sample(&mut rng);
        let b = &self.behavior;

        if let Some((i, delta)) = self.applicable(item) {
            let m = &self.misconceptions[i];
            if u_adopt < m.adoption {
                let tau = (m.fast_time.ln() + b.fast_sigma * z_time).exp();
                let (ca, cb) = b.shortcut_confidence;
                let s = Beta::new(ca, cb)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(&mut rng);
                let obs = if delta > 1e-9 {
                    let d = if item.distractors.is_empty() {
                        m.distractor
                    } else {
                        m.distractor.min(item.distractors.len() - 1)
                    };
                    Observation::wrong(d, tau, s)
                } else {
                    Observation::correct(tau, s)
                };
                return Ok((obs, ResponseKind::Shortcut));
            }
        }

        let theta = self.effective_theta(item, now)?;
        let median = b.time_median * (b.time_difficulty * (item.b - theta)).exp();
        let tau = (median.ln() + b.time_sigma * z_time).exp().min(1e6);
        let p0 = sigmoid(item.a * (theta - item.b)).clamp(0.02, 0.98);
        let k = b.confidence_concentration;
        let s = Beta::new(k * p0, k * (1.0 - p0))
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng);
        let p = self.success_probability(item, tau, s, now)?;
        let obs = if u_correct < p {
            Observation::correct(tau, s)
        } else {
            let n = item.distractors.len().max(1);
            Observation::wrong(((u_distractor * n as f64) as usize).min(n - 1), tau, s)
        };
        self.learn(item, &obs, now)?;
        Ok((obs, ResponseKind::Normal))
    }

    /// Response with the time and confidence fixed by the caller; used to
    /// check the simulator against the closed-form success probability.
    pub fn respond_with_context(
        &mut self,
        item: &Item,
        tau: f64,
        s: f64,
        now: f64,
    ) -> Result<Observation> {
        let mut rng = self.stream();
        let p = self.success_probability(item, tau, s, now)?;
        let obs = if rng.random::<f64>() < p {
            Observation::correct(tau, s)
        } else {
            Observation::wrong(0, tau, s)
        };
        self.learn(item, &obs, now)?;
        Ok(obs)
    }
}

/// Free-standing form of [`SyntheticLearner::respond`].
pub fn simulate_response(
    learner: &mut SyntheticLearner,
    item: &Item,
    now: f64,
) -> Result<Observation> {
    Ok(learner.respond(item, now)?.0)
}

/// One row of an experiment's per-step output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub replication: u64,
    pub step: u32,
    pub arm: String,
    pub item: String,
    /// Correctness, when the step is a response.
    pub y: Option<bool>,
    /// Tracked posterior mass (or another per-step state value).
    pub pi: f64,
    /// Step value: reward, score or factor depending on the experiment.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub summary: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn new(name: &str, seed: u64) -> Self {
        ExperimentReport {
            name: name.into(),
            seed,
            records: Vec::new(),
            summary: BTreeMap::new(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    pub fn set(&mut self, key: &str, value: f64) {
        self.summary.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.summary.get(key).copied()
    }

    pub fn find_check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}
