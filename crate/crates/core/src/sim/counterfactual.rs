//! Paired-arm experiment: counterfactual items against matched standard items.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{bootstrap, mean, mean_interval};
use super::{
    derive_seed, ActiveMisconception, BehaviorParams, ExperimentReport, StepRecord,
    SyntheticLearner,
};
use crate::diagnose::{
    build_feature, em_fit, update_with_correct, update_with_wrong, CorrectEvidenceParams, EmConfig,
    MisconceptionPosterior, MixtureModel, NormalizationStats, WrongResponseFeature,
};
use crate::error::{Error, Result};
use crate::generate::{
    fit_psychometric_predictor, generate_counterfactual, shortcut_margin, AttributeVector,
    GenerationConstraints, GenerationOutcome, MisconceptionRule, RuleTemplate, SearchBudget,
};
use crate::model::{time_effect, Distractor, Item, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualConfig {
    pub seed: u64,
    pub replications: usize,
    pub bank_size: usize,
    /// Learners used to fit the mixture model before the experiment.
    pub population: usize,
    pub population_items: usize,
    /// Share of the population holding the misconception.
    pub prevalence: f64,
    /// Shortcut adoption probability of a learner holding it.
    pub adoption: f64,
    pub fast_time: f64,
    /// Shortcut adoption during the one-step comparison, after the warm-up
    /// has let the engine flag the misconception.
    pub remediated_adoption: f64,
    /// Standard deviation of the per-item noise on stem and distractor embeddings.
    pub embedding_noise: f64,
    pub warmup_items: usize,
    pub trajectory_items: usize,
    /// Margin used for the per-step factor and the reported records.
    pub delta: f64,
    pub delta_grid: Vec<f64>,
    pub factor_bound: f64,
    pub confidence: f64,
    pub bootstrap_reps: usize,
    pub eps_a: f64,
    pub eps_b: f64,
    pub evidence: CorrectEvidenceParams,
    pub behavior: BehaviorParams,
    pub em: EmConfig,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        CounterfactualConfig {
            seed: 7,
            replications: 200,
            bank_size: 60,
            population: 200,
            population_items: 20,
            prevalence: 0.4,
            adoption: 0.6,
            fast_time: 5.0,
            remediated_adoption: 0.0,
            embedding_noise: 0.4,
            warmup_items: 8,
            trajectory_items: 12,
            delta: 1.0,
            delta_grid: vec![0.5, 1.0, 1.5],
            factor_bound: 0.95,
            confidence: 0.99,
            bootstrap_reps: 2000,
            eps_a: 0.2,
            eps_b: 0.3,
            evidence: CorrectEvidenceParams::default(),
            behavior: BehaviorParams::default(),
            em: EmConfig::default(),
        }
    }
}

impl CounterfactualConfig {
    fn validate(&self) -> Result<()> {
        if self.replications < 2 || self.bank_size < 8 || self.population == 0 {
            return Err(Error::Config(
                "need >= 2 replications, >= 8 bank items and a population".into(),
            ));
        }
        if [self.adoption, self.prevalence, self.remediated_adoption]
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Config(
                "adoption and prevalence must lie in [0, 1]".into(),
            ));
        }
        if !(self.delta > 0.0) || self.delta_grid.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config("margins must be > 0".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

const RULE_NAME: &str = "sign-flip";
const SHORTCUT_DISTRACTOR: [f64; 2] = [1.0, 0.0];

/// Fitted diagnostic state and item pools shared by every replication.
struct World {
    bank: Vec<Item>,
    rule: MisconceptionRule,
    model: MixtureModel,
    norm: NormalizationStats,
    /// Mixture component that captures the planted misconception.
    m: usize,
    /// Counterfactual of every bank item, keyed by margin bits.
    counterfactuals: BTreeMap<u64, Vec<Item>>,
}

fn lattice(lo: f64, step: f64, k: i64) -> f64 {
    lo + step * k as f64
}

fn constraints(cfg: &CounterfactualConfig, delta: f64) -> GenerationConstraints {
    GenerationConstraints {
        bounds: vec![[1.0, 9.0], [-3.0, 3.0]],
        steps: vec![0.5, 0.05],
        eps_a: cfg.eps_a,
        eps_b: cfg.eps_b,
        delta,
        ..GenerationConstraints::default()
    }
}

fn jitter(rng: &mut ChaCha8Rng, center: [f64; 2], sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd).expect("positive sd");
    center.iter().map(|c| c + n.sample(rng)).collect()
}

fn build_bank(
    cfg: &CounterfactualConfig,
    rule: &MisconceptionRule,
    rng: &mut ChaCha8Rng,
) -> Vec<Item> {
    let noise = Normal::new(0.0, 0.05).expect("positive sd");
    (0..cfg.bank_size)
        .map(|i| {
            let x0 = lattice(1.0, 0.5, rng.random_range(0..=16));
            let k1 = rng.random_range(1..=3) * if rng.random::<bool>() { 1 } else { -1 };
            let x1 = lattice(-3.0, 0.05, 60 + k1);
            let a = 1.0 + 0.02 * x0 + noise.sample(rng);
            let b = -0.5 + 0.1 * x0 + 0.05 * x1 + noise.sample(rng);
            let mut item = Item::new(format!("q{i:03}"), a, b, vec![0]);
            item.attributes = Some(AttributeVector::new(vec![x0, x1], Vec::new()));
            item.stem_embedding = jitter(rng, [0.6, 0.8], cfg.embedding_noise);
            item.distractors = [SHORTCUT_DISTRACTOR, [0.0, 1.0], [-1.0, 0.0]]
                .iter()
                .map(|c| Distractor {
                    embedding: jitter(rng, *c, cfg.embedding_noise),
                    text: None,
                })
                .collect();
            item.template = Some("Compute {x0} + {x1}".into());
            item.text = item
                .template
                .as_deref()
                .map(|t| crate::generate::render_template(t, item.attributes.as_ref().unwrap()));
            item.rules = vec![rule.name.clone()];
            item
        })
        .collect()
}

fn planted(
    rule: &MisconceptionRule,
    cfg: &CounterfactualConfig,
    theta: f64,
    seed: u64,
) -> SyntheticLearner {
    let mut learner = SyntheticLearner::new(vec![theta], seed);
    learner.behavior = cfg.behavior.clone();
    learner.misconceptions.push(ActiveMisconception {
        rule: rule.clone(),
        adoption: cfg.adoption,
        distractor: 0,
        fast_time: cfg.fast_time,
    });
    learner
}

fn build_world(cfg: &CounterfactualConfig) -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let rule = MisconceptionRule::new(
        0,
        RULE_NAME,
        RuleTemplate::SignFlip {
            coeffs: vec![1.0, 1.0],
            flipped: 1,
            code_effects: Vec::new(),
        },
    );
    let bank = build_bank(cfg, &rule, &mut rng);

    let std_normal = Normal::new(0.0, 1.0).expect("unit sd");
    let mut responses: Vec<(usize, Observation)> = Vec::new();
    for p in 0..cfg.population {
        let theta = std_normal.sample(&mut rng);
        let mut learner = planted(&rule, cfg, theta, derive_seed(cfg.seed ^ 0x5eed, p as u64));
        if rng.random::<f64>() >= cfg.prevalence {
            learner.misconceptions.clear();
        }
        for t in 0..cfg.population_items {
            let q = rng.random_range(0..bank.len());
            let (obs, _) = learner.respond(&bank[q], t as f64)?;
            responses.push((q, obs));
        }
    }
    let norm = NormalizationStats::from_observations(responses.iter().map(|(_, o)| o));
    let features: Vec<WrongResponseFeature> = responses
        .iter()
        .filter(|(_, o)| !o.y)
        .map(|(q, o)| build_feature(&bank[*q], o, &norm))
        .collect::<Result<_>>()?;
    let em_cfg = EmConfig {
        seed: derive_seed(cfg.seed, 1),
        ..cfg.em.clone()
    };
    let mut model = em_fit(&features, &em_cfg)?.model;
    model.topic_map = vec![vec![0]; model.k()];

    let stem = bank[0].stem_embedding.len();
    let m = (0..model.k())
        .min_by(|&x, &y| {
            let dist = |c: usize| {
                let mu = &model.means[c];
                (mu[stem] - SHORTCUT_DISTRACTOR[0]).powi(2)
                    + (mu[stem + 1] - SHORTCUT_DISTRACTOR[1]).powi(2)
            };
            dist(x).total_cmp(&dist(y))
        })
        .unwrap_or(0);

    let predictor = fit_psychometric_predictor(&bank, &[], 1e-6)?;
    let mut margins: Vec<f64> = cfg.delta_grid.clone();
    margins.push(cfg.delta);
    margins.push(0.0);
    let mut counterfactuals = BTreeMap::new();
    for delta in margins {
        if counterfactuals.contains_key(&delta.to_bits()) {
            continue;
        }
        let gc = constraints(cfg, delta);
        let items = bank
            .iter()
            .map(|seed| {
                match generate_counterfactual(
                    seed,
                    &rule,
                    &gc,
                    &predictor,
                    &SearchBudget::default(),
                )? {
                    GenerationOutcome::Found(cf) => Ok(cf.item),
                    GenerationOutcome::Infeasible(r) => Err(Error::Infeasible(format!(
                        "no counterfactual of {} at margin {delta}: {}",
                        seed.id,
                        r.violations.join("; ")
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        counterfactuals.insert(delta.to_bits(), items);
    }
    Ok(World {
        bank,
        rule,
        model,
        norm,
        m,
        counterfactuals,
    })
}

impl World {
    fn pool(&self, delta: f64) -> &[Item] {
        &self.counterfactuals[&delta.to_bits()]
    }

    fn update(
        &self,
        post: &MisconceptionPosterior,
        item: &Item,
        obs: &Observation,
        cfg: &CounterfactualConfig,
    ) -> Result<MisconceptionPosterior> {
        if obs.y {
            let attrs = item
                .attributes
                .as_ref()
                .ok_or_else(|| Error::Data(format!("item {} has no attributes", item.id)))?;
            let margin = shortcut_margin(&self.rule, attrs)?;
            let margins: Vec<Option<f64>> = (0..self.model.k())
                .map(|c| (c == self.m).then_some(margin))
                .collect();
            update_with_correct(post, &margins, effortful(obs, cfg)?, &cfg.evidence)
        } else {
            update_with_wrong(post, &self.model, &build_feature(item, obs, &self.norm)?)
        }
    }
}

/// Mass outside component `m`, i.e. `1 - π_m` without cancellation near 1.
fn rest(post: &MisconceptionPosterior, m: usize) -> f64 {
    post.pi
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != m)
        .map(|(_, p)| p)
        .sum()
}

fn effortful(obs: &Observation, cfg: &CounterfactualConfig) -> Result<bool> {
    let r = &cfg.behavior.response;
    Ok(time_effect(obs.tau, r)? >= r.effort_threshold)
}

struct Replication {
    records: Vec<StepRecord>,
    /// `(π before, π after, 1-π before, 1-π after)` for every correct
    /// effortful trajectory step.
    factors: Vec<[f64; 4]>,
    /// One-step reduction `(arm A, arm B)` keyed by margin bits.
    reductions: BTreeMap<u64, (f64, f64)>,
}

fn record(
    rep: usize,
    step: usize,
    arm: &str,
    item: &Item,
    obs: &Observation,
    pi: f64,
    value: f64,
) -> StepRecord {
    StepRecord {
        replication: rep as u64,
        step: step as u32,
        arm: arm.into(),
        item: item.id.clone(),
        y: Some(obs.y),
        pi,
        value,
    }
}

fn replicate(
    world: &World,
    cfg: &CounterfactualConfig,
    rep: usize,
    deltas: &[f64],
) -> Result<Replication> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 2), rep as u64));
    let theta = Normal::new(0.0, 1.0).expect("unit sd").sample(&mut rng);
    let mut learner = planted(
        &world.rule,
        cfg,
        theta,
        derive_seed(derive_seed(cfg.seed, 3), rep as u64),
    );
    let mut post = MisconceptionPosterior::prior(&world.model);
    let mut records = Vec::new();
    let mut now = 0.0;

    for step in 0..cfg.warmup_items {
        let item = &world.bank[rng.random_range(0..world.bank.len())];
        let (obs, _) = learner.respond(item, now)?;
        post = world.update(&post, item, &obs, cfg)?;
        records.push(record(
            rep,
            step,
            "warmup",
            item,
            &obs,
            post.pi[world.m],
            0.0,
        ));
        now += 1.0;
    }

    let pick = rng.random_range(0..world.bank.len());
    let rest0 = rest(&post, world.m);
    let mut remediated = learner.clone();
    remediated
        .misconceptions
        .iter_mut()
        .for_each(|m| m.adoption = cfg.remediated_adoption);
    let mut reductions = BTreeMap::new();
    for &delta in deltas {
        let counterfactual = &world.pool(delta)[pick];
        let mut standard = world.bank[pick].clone();
        standard.a = counterfactual.a;
        standard.b = counterfactual.b;
        let mut outcome = [0.0; 2];
        for (arm, item) in [counterfactual, &standard].into_iter().enumerate() {
            let mut copy = remediated.clone();
            let (obs, _) = copy.respond(item, now)?;
            let next = world.update(&post, item, &obs, cfg)?;
            outcome[arm] = rest(&next, world.m) - rest0;
            if delta == cfg.delta {
                let name = if arm == 0 { "A" } else { "B" };
                records.push(record(
                    rep,
                    cfg.warmup_items,
                    name,
                    item,
                    &obs,
                    next.pi[world.m],
                    outcome[arm],
                ));
            }
        }
        reductions.insert(delta.to_bits(), (outcome[0], outcome[1]));
    }

    let mut factors = Vec::new();
    let pool = world.pool(cfg.delta);
    for j in 0..cfg.trajectory_items {
        let item = &pool[rng.random_range(0..pool.len())];
        let (obs, _) = learner.respond(item, now)?;
        let before = [post.pi[world.m], rest(&post, world.m)];
        post = world.update(&post, item, &obs, cfg)?;
        let after = post.pi[world.m];
        let counted = obs.y && effortful(&obs, cfg)?;
        if counted {
            factors.push([before[0], after, before[1], rest(&post, world.m)]);
        }
        let value = if counted { after / before[0] } else { 0.0 };
        records.push(record(
            rep,
            cfg.warmup_items + 1 + j,
            "trajectory",
            item,
            &obs,
            after,
            value,
        ));
        now += 1.0;
    }
    Ok(Replication {
        records,
        factors,
        reductions,
    })
}

/// `mean_A / mean_B`. When the standard arm does not reduce π on average the
/// ratio is `+∞` if the counterfactual arm does better, 1 on a tie and 0
/// otherwise.
fn dominance_ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a > b {
        f64::INFINITY
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// Runs the paired experiment. Arm A poses the counterfactual of a bank item;
/// arm B poses the bank item itself carrying the counterfactual's `(a, b)`,
/// so the arms differ only in how far the shortcut misses. Both arms start
/// from the same learner state and use the same random stream. Also tracks
/// π along a run of counterfactual items.
pub fn run_counterfactual_experiment(cfg: &CounterfactualConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let mut deltas = vec![0.0];
    for d in cfg.delta_grid.iter().chain(std::iter::once(&cfg.delta)) {
        if !deltas.contains(d) {
            deltas.push(*d);
        }
    }
    let reps: Vec<Replication> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| replicate(&world, cfg, r, &deltas))
        .collect::<Result<_>>()?;

    let mut report = ExperimentReport::new("counterfactual", cfg.seed);
    report.set("mixture_component", world.m as f64);
    report.set("odds_factor", cfg.evidence.likelihood(cfg.delta));

    let factors: Vec<[f64; 4]> = reps
        .iter()
        .flat_map(|r| r.factors.iter().copied())
        .collect();
    let ratios: Vec<f64> = factors.iter().map(|f| f[1] / f[0]).collect();
    let max_factor = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let increases = factors
        .iter()
        .filter(|f| !(f[1] < f[0] || f[3] > f[2]))
        .count();
    let within = ratios.iter().filter(|f| **f <= cfg.factor_bound).count();
    report.set("factor_steps", factors.len() as f64);
    report.set("factor_max", max_factor);
    report.set("factor_mean", mean(&ratios));
    report.set("factor_within_bound", within as f64);
    report.set(
        "factor_pi_before_mean",
        mean(&factors.iter().map(|f| f[0]).collect::<Vec<_>>()),
    );
    report.check(
        "strict_decrease",
        !factors.is_empty() && increases == 0,
        format!(
            "{} correct effortful counterfactual steps, {increases} without a strict decrease",
            factors.len()
        ),
    );
    report.check(
        "factor_bound",
        !factors.is_empty() && max_factor <= cfg.factor_bound,
        format!(
            "max factor {max_factor:.6} vs bound {}; {within}/{} steps within bound",
            cfg.factor_bound,
            factors.len()
        ),
    );

    let level = cfg.confidence;
    let mut grid_ratios = Vec::new();
    for (i, &delta) in deltas.iter().enumerate() {
        let pairs: Vec<(f64, f64)> = reps
            .iter()
            .map(|r| r.reductions[&delta.to_bits()])
            .collect();
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let diffs: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
        let ratio = dominance_ratio(mean(&a), mean(&b));
        report.set(&format!("reduction_a@{delta}"), mean(&a));
        report.set(&format!("reduction_b@{delta}"), mean(&b));
        report.set(&format!("ratio@{delta}"), ratio);
        if delta == 0.0 {
            let (lo, hi) = mean_interval(
                &diffs,
                level,
                cfg.bootstrap_reps,
                derive_seed(cfg.seed, 100),
            );
            report.set("null_interval_lo", lo);
            report.set("null_interval_hi", hi);
            report.check(
                "null_margin",
                lo <= 0.0 && hi >= 0.0,
                format!(
                    "{:.0}% interval of the paired difference at margin 0: [{lo:.3e}, {hi:.3e}]",
                    level * 100.0
                ),
            );
            continue;
        }
        let dist = bootstrap(
            pairs.len(),
            cfg.bootstrap_reps,
            derive_seed(cfg.seed, 100 + i as u64),
            |idx| {
                let n = idx.len() as f64;
                let ma = idx.iter().map(|&j| a[j]).sum::<f64>() / n;
                let mb = idx.iter().map(|&j| b[j]).sum::<f64>() / n;
                dominance_ratio(ma, mb)
            },
        );
        let lower = super::stats::quantile(&dist, 1.0 - level);
        report.set(&format!("ratio_lower@{delta}"), lower);
        if delta == cfg.delta {
            report.check(
                "dominance",
                lower > 1.0,
                format!(
                    "ratio {ratio:.4}, one-sided {:.0}% lower bound {lower:.4}",
                    level * 100.0
                ),
            );
        }
        if cfg.delta_grid.contains(&delta) {
            grid_ratios.push((delta, ratio));
        }
    }
    grid_ratios.sort_by(|x, y| x.0.total_cmp(&y.0));
    let monotone = grid_ratios.windows(2).all(|w| w[1].1 >= w[0].1);
    report.check(
        "monotone_in_margin",
        monotone,
        grid_ratios
            .iter()
            .map(|(d, r)| format!("{d}: {r:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
    );

    report.records = reps.into_iter().flat_map(|r| r.records).collect();
    Ok(report)
}
