//! Score calibration on simulated cohorts and the score's order properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, ExperimentReport, StepRecord, SyntheticLearner};
use crate::edgescore::{
    calibrate_weights, compute_components, edge_score, mean_loss, CalibrationConfig, PaceStats,
    ScoreComponents, ScoreWeights,
};
use crate::error::{Error, Result};
use crate::model::{laplace_update, Item, LearnerState, ResponseModelParams, TopicBelief};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeScoreConfig {
    pub seed: u64,
    /// Size of the planted-weight recovery set.
    pub planted_n: usize,
    /// Planted `(w_M, w_R, w_P, w_C, γ)`.
    pub planted: [f64; 5],
    pub recovery_tol: f64,
    pub cohort: usize,
    pub topics: usize,
    pub items_per_topic: usize,
    pub practice_items: usize,
    pub window: usize,
    /// Days between the score and the delayed probe.
    pub probe_delay: f64,
    pub probe_items: usize,
    pub train_fraction: f64,
    pub learning_gain: f64,
    pub property_pairs: usize,
    pub calibration: CalibrationConfig,
    pub response: ResponseModelParams,
}

impl Default for EdgeScoreConfig {
    fn default() -> Self {
        EdgeScoreConfig {
            seed: 13,
            planted_n: 5000,
            planted: [0.45, 0.25, 0.03, 0.08, 0.2],
            recovery_tol: 1e-2,
            cohort: 400,
            topics: 3,
            items_per_topic: 30,
            practice_items: 24,
            window: 10,
            probe_delay: 7.0,
            probe_items: 6,
            train_fraction: 0.7,
            learning_gain: 0.03,
            property_pairs: 10_000,
            calibration: CalibrationConfig::default(),
            response: ResponseModelParams::default(),
        }
    }
}

fn random_components<R: Rng>(rng: &mut R) -> ScoreComponents {
    ScoreComponents {
        m: rng.random(),
        r: rng.random(),
        p: rng.random_range(-3.0..3.0),
        c: rng.random_range(-1.0..1.0),
        misc_mass: rng.random(),
        low_data: false,
    }
}

fn weights(v: &[f64; 5]) -> ScoreWeights {
    ScoreWeights {
        w_m: v[0],
        w_r: v[1],
        w_p: v[2],
        w_c: v[3],
        gamma_pen: v[4],
        scale: 100.0,
        offset: 0.0,
    }
}

struct Cohort {
    /// `(learner, components, probe success rate)` for every learner and topic.
    rows: Vec<(usize, ScoreComponents, f64)>,
}

fn simulate_cohort(cfg: &EdgeScoreConfig) -> Result<Cohort> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let bank: Vec<Item> = (0..cfg.topics * cfg.items_per_topic)
        .map(|i| {
            Item::new(
                format!(
                    "t{}q{:02}",
                    i / cfg.items_per_topic,
                    i % cfg.items_per_topic
                ),
                rng.random_range(0.7..1.8),
                rng.random_range(-2.0..2.0),
                vec![i / cfg.items_per_topic],
            )
        })
        .collect();
    let by_topic: Vec<Vec<&Item>> = (0..cfg.topics)
        .map(|t| bank.iter().filter(|it| it.loads(t)).collect())
        .collect();

    let practiced: Vec<(SyntheticLearner, LearnerState, u64)> = (0..cfg.cohort)
        .into_par_iter()
        .map(|l| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 2), l as u64));
            let normal = Normal::new(0.0, 1.0).expect("unit sd");
            let theta = (0..cfg.topics).map(|_| normal.sample(&mut rng)).collect();
            let mut learner =
                SyntheticLearner::new(theta, derive_seed(derive_seed(cfg.seed, 3), l as u64));
            learner.true_lambda = (0..cfg.topics)
                .map(|_| rng.random_range(0.01..0.2))
                .collect();
            learner.learning_gain = cfg.learning_gain;
            learner.behavior.response = cfg.response.clone();
            let mut state = LearnerState::uniform(cfg.topics, TopicBelief::default());
            for step in 0..cfg.practice_items {
                let pool = &by_topic[rng.random_range(0..cfg.topics)];
                let item = pool[rng.random_range(0..pool.len())];
                let now = step as f64;
                let (obs, _) = learner.respond(item, now)?;
                state = laplace_update(&state, item, &obs, now, &cfg.response)?;
            }
            Ok((learner, state, rng.random()))
        })
        .collect::<Result<_>>()?;

    let peer_records: Vec<(f64, f64)> = practiced
        .iter()
        .flat_map(|(_, s, _)| s.history.iter().map(|h| (h.b, h.obs.tau)))
        .collect();
    let peers = PaceStats::from_records(&peer_records, &[-1.0, 0.0, 1.0]);
    let now = cfg.practice_items as f64;
    let probe_at = now + cfg.probe_delay;

    let rows: Vec<Vec<(usize, ScoreComponents, f64)>> = practiced
        .into_par_iter()
        .enumerate()
        .map(|(l, (mut learner, state, probe_seed))| {
            let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
            (0..cfg.topics)
                .map(|t| {
                    let comps =
                        compute_components(&state, t, &bank, &peers, cfg.window, now, None)?;
                    let mut hits = 0usize;
                    for _ in 0..cfg.probe_items {
                        let item = by_topic[t][rng.random_range(0..by_topic[t].len())];
                        hits += learner.respond(item, probe_at)?.0.y as usize;
                    }
                    Ok((l, comps, hits as f64 / cfg.probe_items as f64))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(Cohort {
        rows: rows.into_iter().flatten().collect(),
    })
}

/// Counts monotonicity and Lipschitz violations of the score map over
/// random pairs, for the given weights.
fn property_suite(w: &ScoreWeights, pairs: usize, seed: u64) -> (usize, usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut monotone = 0;
    let mut lipschitz = 0;
    let mut worst: f64 = 0.0;
    let bound = w.lipschitz();
    for _ in 0..pairs {
        let x = random_components(&mut rng);
        let mut up = x;
        up.m += rng.random_range(0.0..0.2);
        up.r += rng.random_range(0.0..0.2);
        up.p += rng.random_range(0.0..0.5);
        up.c += rng.random_range(0.0..0.3);
        up.misc_mass -= rng.random_range(0.0..0.2);
        if edge_score(&up, w) < edge_score(&x, w) {
            monotone += 1;
        }
        let y = random_components(&mut rng);
        let dist = [
            x.m - y.m,
            x.r - y.r,
            x.p - y.p,
            x.c - y.c,
            x.misc_mass - y.misc_mass,
        ]
        .iter()
        .fold(0.0f64, |acc, d| acc.max(d.abs()));
        let gap = (edge_score(&x, w) - edge_score(&y, w)).abs();
        if dist > 0.0 {
            worst = worst.max(gap / dist);
        }
        if gap > bound * dist + 1e-9 {
            lipschitz += 1;
        }
    }
    (monotone, lipschitz, worst)
}

pub fn run_edgescore_experiment(cfg: &EdgeScoreConfig) -> Result<ExperimentReport> {
    if cfg.planted_n == 0
        || cfg.cohort < 2
        || cfg.topics == 0
        || cfg.items_per_topic == 0
        || cfg.probe_items == 0
    {
        return Err(Error::Config(
            "edge score experiment sizes must be positive".into(),
        ));
    }
    if cfg.planted.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config("planted weights must be >= 0".into()));
    }
    let mut report = ExperimentReport::new("edgescore", cfg.seed);

    let planted = weights(&cfg.planted);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let data: Vec<(ScoreComponents, f64)> = (0..cfg.planted_n)
        .map(|_| {
            let c = random_components(&mut rng);
            let y = edge_score(&c, &planted) / 100.0;
            (c, y)
        })
        .collect();
    let fit = calibrate_weights(&data, &cfg.calibration)?;
    let got = [
        fit.weights.w_m,
        fit.weights.w_r,
        fit.weights.w_p,
        fit.weights.w_c,
        fit.weights.gamma_pen,
    ];
    let err = got
        .iter()
        .zip(&cfg.planted)
        .fold(0.0f64, |acc, (g, p)| acc.max((g - p).abs()));
    for (name, v) in ["w_m", "w_r", "w_p", "w_c", "gamma_pen"].iter().zip(got) {
        report.set(&format!("recovered_{name}"), v);
    }
    report.set("recovery_max_error", err);
    report.check(
        "planted_recovery",
        err <= cfg.recovery_tol,
        format!("max weight error {err:.3e} (n = {})", cfg.planted_n),
    );

    let cohort = simulate_cohort(cfg)?;
    let cut = ((cfg.cohort as f64) * cfg.train_fraction).round() as usize;
    let (train, test): (Vec<_>, Vec<_>) =
        cohort.rows.iter().copied().partition(|(l, _, _)| *l < cut);
    let train: Vec<(ScoreComponents, f64)> = train.into_iter().map(|(_, c, y)| (c, y)).collect();
    let test: Vec<(ScoreComponents, f64)> = test.into_iter().map(|(_, c, y)| (c, y)).collect();
    let calibrated = calibrate_weights(&train, &cfg.calibration)?;
    let default = ScoreWeights::default();
    let loss_cal = mean_loss(&test, &calibrated.weights, cfg.calibration.loss);
    let loss_default = mean_loss(&test, &default, cfg.calibration.loss);
    report.set("heldout_loss_calibrated", loss_cal);
    report.set("heldout_loss_default", loss_default);
    report.set("cohort_rows", cohort.rows.len() as f64);
    report.check(
        "heldout_loss",
        loss_cal <= loss_default,
        format!("held-out loss {loss_cal:.5} calibrated vs {loss_default:.5} default"),
    );
    for (l, c, y) in &cohort.rows {
        report.records.push(StepRecord {
            replication: *l as u64,
            step: 0,
            arm: if *l < cut {
                "train".into()
            } else {
                "test".into()
            },
            item: String::new(),
            y: None,
            pi: c.misc_mass,
            value: edge_score(c, &calibrated.weights) - 100.0 * y,
        });
    }

    let mut monotone = 0;
    let mut lipschitz = 0;
    for (k, w) in [planted, default, calibrated.weights].iter().enumerate() {
        let (m, l, worst) =
            property_suite(w, cfg.property_pairs, derive_seed(cfg.seed, 10 + k as u64));
        monotone += m;
        lipschitz += l;
        report.set(
            &format!("lipschitz_ratio_{k}"),
            worst / w.lipschitz().max(f64::MIN_POSITIVE),
        );
    }
    report.set("monotonicity_violations", monotone as f64);
    report.set("lipschitz_violations", lipschitz as f64);
    report.check(
        "monotone",
        monotone == 0,
        format!(
            "{monotone} violations over 3 x {} pairs",
            cfg.property_pairs
        ),
    );
    report.check(
        "lipschitz",
        lipschitz == 0,
        format!(
            "{lipschitz} violations over 3 x {} pairs",
            cfg.property_pairs
        ),
    );
    Ok(report)
}
