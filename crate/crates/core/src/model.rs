//! Learner belief state and the augmented 2PL response model.
//!
//! Abilities are tracked per topic as independent Gaussians. An item loads on
//! a set of topics (its Q-matrix row); the ability it probes is the weighted
//! mean of those topic abilities. Each observation updates the loaded topics
//! with one Newton step on the log-posterior, and effortful correct
//! retrievals reset the forgetting clock.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::AttributeVector;

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Keeps probabilities strictly inside (0, 1) so that `p(1-p) > 0`.
fn clamp_open_unit(p: f64) -> f64 {
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// A calibrated item: 2PL parameters, the topics it loads on and the
/// embeddings used by diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    /// Discrimination, strictly positive.
    pub a: f64,
    /// Difficulty on the logit scale.
    pub b: f64,
    /// Indices of the topics this item loads on (support of its Q-matrix row),
    /// sorted and unique.
    pub concepts: Vec<usize>,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<AttributeVector>,
    #[serde(default)]
    pub stem_embedding: Vec<f64>,
    /// Stem template; `{x0}`, `{c0}`... are replaced by attribute values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Rendered stem text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Names of misconception rules that apply to this item.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<String>,
}

impl Item {
    /// Minimal item used in tests and synthetic banks.
    pub fn new(id: impl Into<String>, a: f64, b: f64, concepts: Vec<usize>) -> Self {
        Item {
            id: id.into(),
            a,
            b,
            concepts,
            distractors: Vec::new(),
            attributes: None,
            stem_embedding: Vec::new(),
            template: None,
            text: None,
            rules: Vec::new(),
        }
    }

    pub fn loads(&self, topic: usize) -> bool {
        self.concepts.binary_search(&topic).is_ok()
    }

    pub fn validate(&self, topic_count: usize) -> Result<()> {
        if !(self.a > 0.0) || !self.a.is_finite() {
            return Err(Error::Domain(format!(
                "item {}: discrimination a must be > 0",
                self.id
            )));
        }
        if !self.b.is_finite() {
            return Err(Error::Domain(format!(
                "item {}: difficulty b must be finite",
                self.id
            )));
        }
        if self.concepts.is_empty() {
            return Err(Error::Domain(format!(
                "item {}: concepts must select at least one topic",
                self.id
            )));
        }
        if self.concepts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!(
                "item {}: concepts must be sorted and unique",
                self.id
            )));
        }
        if let Some(&t) = self.concepts.iter().find(|&&t| t >= topic_count) {
            return Err(Error::Index {
                index: t,
                len: topic_count,
            });
        }
        if let Some(first) = self.distractors.first() {
            let dim = first.embedding.len();
            if let Some(d) = self.distractors.iter().find(|d| d.embedding.len() != dim) {
                return Err(Error::Shape {
                    expected: dim,
                    got: d.embedding.len(),
                });
            }
        }
        Ok(())
    }
}

/// Gaussian belief about one topic ability plus its forgetting dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopicBelief {
    pub mu: f64,
    pub var: f64,
    /// Forgetting rate per unit time.
    pub lambda: f64,
    /// Time of the last successful effortful retrieval.
    pub last_retrieval: f64,
}

impl TopicBelief {
    pub fn new(mu: f64, var: f64, lambda: f64, last_retrieval: f64) -> Self {
        TopicBelief {
            mu,
            var,
            lambda,
            last_retrieval,
        }
    }
}

impl Default for TopicBelief {
    fn default() -> Self {
        TopicBelief {
            mu: 0.0,
            var: 1.0,
            lambda: 0.1,
            last_retrieval: 0.0,
        }
    }
}

/// One learner response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: bool,
    /// Chosen distractor, present exactly when `y` is false.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Response time in seconds.
    pub tau: f64,
    /// Self-reported confidence in [0, 1].
    pub s: f64,
}

impl Observation {
    pub fn correct(tau: f64, s: f64) -> Self {
        Observation {
            y: true,
            d: None,
            tau,
            s,
        }
    }

    pub fn wrong(d: usize, tau: f64, s: f64) -> Self {
        Observation {
            y: false,
            d: Some(d),
            tau,
            s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.y == self.d.is_some() {
            return Err(Error::Consistency(
                "distractor index must be present exactly when y = 0".into(),
            ));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::Domain(format!(
                "response time must be >= 0, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::Domain(format!(
                "confidence must lie in [0, 1], got {}",
                self.s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub item_id: String,
    pub obs: Observation,
    pub time: f64,
    /// Topics the item loaded on, kept so history can be read without the bank.
    #[serde(default)]
    pub topics: Vec<usize>,
    /// Item difficulty at the time of the response.
    #[serde(default)]
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub topics: Vec<TopicBelief>,
    #[serde(default)]
    pub misconception_posterior: Vec<f64>,
    #[serde(default)]
    pub history: Vec<HistoryRecord>,
}

impl LearnerState {
    pub fn new(topics: Vec<TopicBelief>) -> Self {
        LearnerState {
            topics,
            misconception_posterior: Vec::new(),
            history: Vec::new(),
        }
    }

    pub fn uniform(topic_count: usize, belief: TopicBelief) -> Self {
        Self::new(vec![belief; topic_count])
    }

    pub fn validate(&self) -> Result<()> {
        for (t, b) in self.topics.iter().enumerate() {
            if !(b.var > 0.0) || !b.var.is_finite() {
                return Err(Error::Domain(format!("topic {t}: variance must be > 0")));
            }
            if !(b.lambda >= 0.0) {
                return Err(Error::Domain(format!(
                    "topic {t}: forgetting rate must be >= 0"
                )));
            }
        }
        if !self.misconception_posterior.is_empty() {
            let sum: f64 = self.misconception_posterior.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || self.misconception_posterior.iter().any(|&p| p < 0.0) {
                return Err(Error::Domain(format!(
                    "misconception posterior must sum to 1 (sum = {sum})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseModelParams {
    pub beta_tau: f64,
    pub beta_s: f64,
    /// Reference time scale in seconds; `g` saturates at twice this value.
    pub tau_ref: f64,
    /// Per-topic weights in the effective ability; empty means all ones.
    pub mixture_weights: Vec<f64>,
    pub effort_threshold: f64,
    /// Multiplicative shrink applied to the forgetting rate on effortful retrieval.
    pub lambda_shrink: f64,
    pub lambda_floor: f64,
}

impl Default for ResponseModelParams {
    fn default() -> Self {
        ResponseModelParams {
            beta_tau: 0.3,
            beta_s: 0.2,
            tau_ref: 30.0,
            mixture_weights: Vec::new(),
            effort_threshold: 0.25,
            lambda_shrink: 0.05,
            lambda_floor: 1e-4,
        }
    }
}

impl ResponseModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_ref > 0.0) {
            return Err(Error::Config("tau_ref must be > 0".into()));
        }
        if self.mixture_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("mixture weights must be >= 0".into()));
        }
        if !(self.lambda_shrink > 0.0 && self.lambda_shrink < 1.0) {
            return Err(Error::Config("lambda_shrink must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn weight(&self, topic: usize) -> f64 {
        self.mixture_weights.get(topic).copied().unwrap_or(1.0)
    }

    /// Normalized weights `w̃_t` over the item's topics, in `item.concepts` order.
    pub fn normalized_weights(&self, item: &Item) -> Result<Vec<f64>> {
        let raw: Vec<f64> = item.concepts.iter().map(|&t| self.weight(t)).collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateWeights(format!(
                "item {} selects topics whose weights are all zero",
                item.id
            )));
        }
        Ok(raw.into_iter().map(|w| w / total).collect())
    }
}

fn check_topics(state: &LearnerState, item: &Item) -> Result<()> {
    match item.concepts.iter().find(|&&t| t >= state.topics.len()) {
        Some(&t) => Err(Error::Index {
            index: t,
            len: state.topics.len(),
        }),
        None if item.concepts.is_empty() => {
            Err(Error::Domain(format!("item {} loads on no topic", item.id)))
        }
        None => Ok(()),
    }
}

/// Weighted mean ability over the topics the item loads on.
pub fn effective_ability(
    state: &LearnerState,
    item: &Item,
    params: &ResponseModelParams,
) -> Result<f64> {
    check_topics(state, item)?;
    let w = params.normalized_weights(item)?;
    Ok(item
        .concepts
        .iter()
        .zip(&w)
        .map(|(&t, w)| w * state.topics[t].mu)
        .sum())
}

/// `g(τ) = 1 - 2·min(τ / (2·τ_ref), 1)`: 1 for instant answers, -1 at and beyond `2·τ_ref`.
pub fn time_effect(tau: f64, params: &ResponseModelParams) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!(
            "response time must be >= 0, got {tau}"
        )));
    }
    let cap = 2.0 * params.tau_ref;
    Ok(1.0 - 2.0 * (tau / cap).min(1.0))
}

/// `h(s) = 2s - 1`.
pub fn confidence_effect(s: f64, _params: &ResponseModelParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!(
            "confidence must lie in [0, 1], got {s}"
        )));
    }
    Ok(2.0 * s - 1.0)
}

/// Logit of the augmented 2PL model for a given effective ability.
pub fn response_logit(
    theta_eff: f64,
    item: &Item,
    tau: f64,
    s: f64,
    params: &ResponseModelParams,
) -> Result<f64> {
    Ok(item.a * (theta_eff - item.b)
        + params.beta_tau * time_effect(tau, params)?
        + params.beta_s * confidence_effect(s, params)?)
}

/// Probability of a correct response, strictly inside (0, 1).
pub fn response_probability(
    state: &LearnerState,
    item: &Item,
    tau: f64,
    s: f64,
    params: &ResponseModelParams,
) -> Result<f64> {
    let theta = effective_ability(state, item, params)?;
    Ok(clamp_open_unit(sigmoid(response_logit(
        theta, item, tau, s, params,
    )?)))
}

/// Response time and confidence at which `g` and `h` vanish.
pub fn neutral_context(params: &ResponseModelParams) -> (f64, f64) {
    (params.tau_ref, 0.5)
}

/// Posterior variance after one Newton step with curvature `a² p(1-p) w̃²`.
pub fn updated_variance(var: f64, a: f64, p: f64, w_norm: f64) -> f64 {
    1.0 / (1.0 / var + a * a * p * (1.0 - p) * w_norm * w_norm)
}

/// One Laplace (Newton) step on the log-posterior of every topic the item
/// loads on, followed by the retention reset for effortful correct answers.
/// The observation is appended to the history.
pub fn laplace_update(
    state: &LearnerState,
    item: &Item,
    obs: &Observation,
    now: f64,
    params: &ResponseModelParams,
) -> Result<LearnerState> {
    obs.validate()?;
    if let Some(d) = obs.d {
        if !item.distractors.is_empty() && d >= item.distractors.len() {
            return Err(Error::Consistency(format!(
                "distractor {d} does not exist on item {} ({} distractors)",
                item.id,
                item.distractors.len()
            )));
        }
    }
    check_topics(state, item)?;
    let weights = params.normalized_weights(item)?;
    let p = response_probability(state, item, obs.tau, obs.s, params)?;
    let residual = if obs.y { 1.0 - p } else { -p };
    let effortful = obs.y && time_effect(obs.tau, params)? >= params.effort_threshold;

    let mut next = state.clone();
    for (&t, &w) in item.concepts.iter().zip(&weights) {
        let belief = &mut next.topics[t];
        let var = updated_variance(belief.var, item.a, p, w);
        let gain = var * item.a * w;
        belief.mu += gain * residual;
        belief.var = var;
        if effortful {
            belief.last_retrieval = now;
            if belief.lambda > params.lambda_floor {
                belief.lambda =
                    ((1.0 - params.lambda_shrink) * belief.lambda).max(params.lambda_floor);
            }
        }
    }
    next.history.push(HistoryRecord {
        item_id: item.id.clone(),
        obs: *obs,
        time: now,
        topics: item.concepts.clone(),
        b: item.b,
    });
    Ok(next)
}

/// `ρ = exp(-λ·[now - L]₊)`.
pub fn retention(belief: &TopicBelief, now: f64) -> f64 {
    let elapsed = (now - belief.last_retrieval).max(0.0);
    (-belief.lambda * elapsed).exp()
}

/// 2PL Fisher information `a² σ(a(θ-b)) σ(-a(θ-b))`.
pub fn fisher_information(a: f64, b: f64, theta: f64) -> f64 {
    let z = a * (theta - b);
    a * a * sigmoid(z) * sigmoid(-z)
}
