use std::collections::{BTreeMap, HashSet};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::SchedulerParams;
use crate::error::{Error, Result};
use crate::model::{Item, LearnerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Easy,
    OnLevel,
    SlightlyHard,
    CrossTopic,
    Recap,
}

const PHASES: [Phase; 5] = [
    Phase::Easy,
    Phase::OnLevel,
    Phase::SlightlyHard,
    Phase::CrossTopic,
    Phase::Recap,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub item_id: String,
    pub topic: usize,
    pub phase: Phase,
    pub b: f64,
    /// True for generated counterfactual items (not in the bank).
    #[serde(default)]
    pub generated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SessionPlan {
    pub entries: Vec<SessionEntry>,
    /// Slots filled from a neighbouring difficulty bin.
    pub borrowed: usize,
}

/// `1 - |A ∩ B| / |A ∪ B|` over sorted concept lists.
pub fn jaccard_distance(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|t| b.contains(t)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Largest-remainder split of `n` slots by the ramp fractions.
fn phase_counts(ramp: &[f64; 5], n: usize) -> [usize; 5] {
    let raw: Vec<f64> = ramp.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 5];
    for i in 0..5 {
        counts[i] = raw[i].floor() as usize;
    }
    let mut rest: Vec<usize> = (0..5).collect();
    rest.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in rest.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

struct Composer<'a> {
    bank: &'a [Item],
    learner: &'a LearnerState,
    params: &'a SchedulerParams,
    used: HashSet<&'a str>,
    plan: SessionPlan,
}

impl<'a> Composer<'a> {
    fn mu(&self, topic: usize) -> f64 {
        self.learner.topics[topic].mu
    }

    fn band(&self, topic: usize, phase: Phase) -> (f64, f64) {
        let mu = self.mu(topic);
        let p = self.params;
        match phase {
            Phase::Easy => (f64::NEG_INFINITY, mu - p.level_band),
            Phase::OnLevel => (mu - p.level_band, mu + p.level_band),
            _ => (mu + p.level_band, mu + p.hard_limit),
        }
    }

    fn in_band(&self, topic: usize, phase: Phase, b: f64) -> bool {
        let (lo, hi) = self.band(topic, phase);
        match phase {
            Phase::Easy => b <= hi,
            Phase::OnLevel => b > lo && b < hi,
            _ => b >= lo && b <= hi,
        }
    }

    /// Preferred item inside the band: the one nearest the band's inner edge.
    fn pick(&self, topic: usize, phase: Phase) -> Option<(&'a Item, bool)> {
        let target = match phase {
            Phase::Easy => self.mu(topic) - self.params.level_band,
            Phase::OnLevel => self.mu(topic),
            _ => self.mu(topic) + self.params.level_band,
        };
        let fresh = |it: &&'a Item| it.loads(topic) && !self.used.contains(it.id.as_str());
        let within = self
            .bank
            .iter()
            .filter(fresh)
            .filter(|it| self.in_band(topic, phase, it.b))
            .min_by(|x, y| (x.b - target).abs().total_cmp(&(y.b - target).abs()));
        if let Some(it) = within {
            return Some((it, false));
        }
        let (lo, hi) = self.band(topic, phase);
        let gap = |b: f64| {
            if b < lo {
                lo - b
            } else if b > hi {
                b - hi
            } else {
                0.0
            }
        };
        self.bank
            .iter()
            .filter(fresh)
            .min_by(|x, y| gap(x.b).total_cmp(&gap(y.b)))
            .map(|it| (it, true))
    }

    fn push(&mut self, item: &'a Item, topic: usize, phase: Phase) {
        self.used.insert(item.id.as_str());
        self.plan.entries.push(SessionEntry {
            item_id: item.id.clone(),
            topic,
            phase,
            b: item.b,
            generated: false,
        });
    }

    fn ramp_phase(&mut self, phase: Phase, count: usize, selected: &[usize]) {
        let start = self.plan.entries.len();
        for slot in 0..count {
            let mut placed = false;
            for k in 0..selected.len() {
                let topic = selected[(slot + k) % selected.len()];
                if let Some((item, borrowed)) = self.pick(topic, phase) {
                    if borrowed {
                        info!(
                            "{phase:?} bin empty for topic {topic}; borrowed item {} (b = {})",
                            item.id, item.b
                        );
                        self.plan.borrowed += 1;
                    }
                    self.push(item, topic, phase);
                    placed = true;
                    break;
                }
            }
            if !placed {
                warn!("bank exhausted during {phase:?} phase");
                break;
            }
        }
        self.plan.entries[start..].sort_by(|x, y| x.b.total_cmp(&y.b));
    }

    fn cross_topic(&mut self, count: usize, selected: &[usize]) {
        for _ in 0..count {
            let prev: Vec<usize> = match self.plan.entries.last() {
                Some(e) => self
                    .bank
                    .iter()
                    .find(|it| it.id == e.item_id)
                    .map(|it| it.concepts.clone())
                    .unwrap_or_else(|| vec![e.topic]),
                None => vec![selected[0]],
            };
            let touches = |it: &Item| it.concepts.iter().any(|t| selected.contains(t));
            let mut pool: Vec<&'a Item> = self
                .bank
                .iter()
                .filter(|it| !self.used.contains(it.id.as_str()) && touches(it))
                .collect();
            if pool.is_empty() {
                pool = self
                    .bank
                    .iter()
                    .filter(|it| !self.used.contains(it.id.as_str()))
                    .collect();
            }
            let level_gap = |it: &Item| {
                let ts: Vec<usize> = it
                    .concepts
                    .iter()
                    .copied()
                    .filter(|t| selected.contains(t))
                    .collect();
                let ts = if ts.is_empty() {
                    it.concepts.clone()
                } else {
                    ts
                };
                let mu = ts.iter().map(|&t| self.mu(t)).sum::<f64>() / ts.len() as f64;
                (it.b - mu).abs()
            };
            let best = pool.into_iter().min_by(|x, y| {
                jaccard_distance(&y.concepts, &prev)
                    .total_cmp(&jaccard_distance(&x.concepts, &prev))
                    .then(level_gap(x).total_cmp(&level_gap(y)))
            });
            match best {
                Some(item) => {
                    let topic = item
                        .concepts
                        .iter()
                        .copied()
                        .find(|t| selected.contains(t))
                        .unwrap_or(item.concepts[0]);
                    self.push(item, topic, Phase::CrossTopic);
                }
                None => {
                    warn!("bank exhausted during cross-topic phase");
                    break;
                }
            }
        }
    }

    fn easiest(&self, topic: usize, prefer_fresh: bool) -> Option<&'a Item> {
        let on_topic = self.bank.iter().filter(|it| it.loads(topic));
        let easy: Vec<&'a Item> = on_topic
            .clone()
            .filter(|it| self.in_band(topic, Phase::Easy, it.b))
            .collect();
        let pool: Vec<&'a Item> = if easy.is_empty() {
            on_topic.collect()
        } else {
            easy
        };
        let fresh: Vec<&'a Item> = pool
            .iter()
            .copied()
            .filter(|it| !self.used.contains(it.id.as_str()))
            .collect();
        let pool = if prefer_fresh && !fresh.is_empty() {
            fresh
        } else {
            pool
        };
        pool.into_iter().min_by(|x, y| x.b.total_cmp(&y.b))
    }

    fn recap(&mut self, count: usize, selected: &[usize], session_start: f64) {
        let mut wrong: Vec<usize> = Vec::new();
        for h in self
            .learner
            .history
            .iter()
            .filter(|h| h.time >= session_start && !h.obs.y)
        {
            for &t in &h.topics {
                if !wrong.contains(&t) && t < self.learner.topics.len() {
                    wrong.push(t);
                }
            }
        }
        let (topics, fresh) = if wrong.is_empty() {
            (selected.to_vec(), true)
        } else {
            (wrong, false)
        };
        for slot in 0..count {
            let topic = topics[slot % topics.len()];
            if let Some(item) = self.easiest(topic, fresh) {
                self.push(item, topic, Phase::Recap);
            }
        }
    }
}

/// Builds the ordered session for the selected topics: easy, on-level,
/// slightly hard, cross-topic and recap phases. Counterfactual items for
/// flagged topics open the on-level phase.
pub fn compose_session(
    selected: &[usize],
    bank: &[Item],
    learner: &LearnerState,
    params: &SchedulerParams,
    counterfactuals: &BTreeMap<usize, Vec<Item>>,
    session_start: f64,
) -> Result<SessionPlan> {
    params.validate()?;
    if selected.is_empty() {
        return Ok(SessionPlan::default());
    }
    for &t in selected {
        if t >= learner.topics.len() {
            return Err(Error::Index {
                index: t,
                len: learner.topics.len(),
            });
        }
        if !bank.iter().any(|it| it.loads(t)) {
            return Err(Error::Data(format!(
                "bank has no item for selected topic {t}"
            )));
        }
    }
    let counts = phase_counts(&params.ramp, params.session_length);
    let mut c = Composer {
        bank,
        learner,
        params,
        used: HashSet::new(),
        plan: SessionPlan::default(),
    };
    for (phase, &count) in PHASES.iter().zip(&counts) {
        match phase {
            Phase::OnLevel => {
                let mut generated = Vec::new();
                for &t in selected {
                    for item in counterfactuals.get(&t).into_iter().flatten() {
                        if generated.len() < count {
                            generated.push(SessionEntry {
                                item_id: item.id.clone(),
                                topic: t,
                                phase: Phase::OnLevel,
                                b: item.b,
                                generated: true,
                            });
                        }
                    }
                }
                let rest = count - generated.len();
                c.plan.entries.extend(generated);
                c.ramp_phase(Phase::OnLevel, rest, selected);
            }
            Phase::CrossTopic => c.cross_topic(count, selected),
            Phase::Recap => c.recap(count, selected, session_start),
            _ => c.ramp_phase(*phase, count, selected),
        }
    }
    Ok(c.plan)
}
